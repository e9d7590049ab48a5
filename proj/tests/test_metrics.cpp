#include <doctest.h>

#include <cmath>
#include <set>

#include "tadp/error.hpp"
#include "tadp/metrics.hpp"
#include "tadp/rng.hpp"

using namespace tadp;
using namespace tadp::nn;
using namespace tadp::metrics;
using heads::DetBox;

namespace {

// set-arithmetic mIoU oracle, aggregated across the dataset
float oracle_miou(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts, int k,
                  int ignore) {
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
        std::set<std::pair<size_t, std::int64_t>> gt_set, pred_set;
        for (size_t im = 0; im < gts.size(); ++im)
            for (std::int64_t i = 0; i < gts[im].numel(); ++i) {
                long g = std::lround(gts[im][i]);
                if (g == ignore) continue;
                if (g == c) gt_set.insert({im, i});
                if (std::lround(preds[im][i]) == c) pred_set.insert({im, i});
            }
        if (gt_set.empty()) continue;
        std::vector<std::pair<size_t, std::int64_t>> inter;
        std::set_intersection(gt_set.begin(), gt_set.end(), pred_set.begin(), pred_set.end(),
                              std::back_inserter(inter));
        double uni = static_cast<double>(gt_set.size() + pred_set.size() - inter.size());
        sum += static_cast<double>(inter.size()) / uni;
        ++present;
    }
    return static_cast<float>(sum / present);
}

// independent AP oracle: same greedy matching written from scratch; AP taken
// as the sum of envelope precision at each true positive divided by gt count
double oracle_ap_class(const std::vector<std::vector<DetBox>>& preds,
                       const std::vector<std::vector<DetBox>>& gts, int cls, float thresh) {
    struct P {
        float score;
        size_t im, idx;
    };
    std::vector<P> all;
    long long n_gt = 0;
    for (size_t im = 0; im < preds.size(); ++im) {
        for (size_t j = 0; j < preds[im].size(); ++j)
            if (preds[im][j].cls == cls) all.push_back({preds[im][j].score, im, j});
        for (const auto& g : gts[im])
            if (g.cls == cls) ++n_gt;
    }
    if (n_gt == 0) return -1.0;
    std::sort(all.begin(), all.end(), [](const P& a, const P& b) { return a.score > b.score; });
    std::vector<std::set<size_t>> used(gts.size());
    std::vector<int> hit(all.size(), 0);
    for (size_t i = 0; i < all.size(); ++i) {
        float best = 0.0f;
        int pick = -1;
        for (size_t g = 0; g < gts[all[i].im].size(); ++g) {
            if (gts[all[i].im][g].cls != cls || used[all[i].im].count(g)) continue;
            float iou = heads::box_iou(preds[all[i].im][all[i].idx], gts[all[i].im][g]);
            if (iou > best) {
                best = iou;
                pick = static_cast<int>(g);
            }
        }
        if (pick >= 0 && best >= thresh) {
            used[all[i].im].insert(static_cast<size_t>(pick));
            hit[i] = 1;
        }
    }
    std::vector<double> prec(all.size());
    int tp = 0;
    for (size_t i = 0; i < all.size(); ++i) {
        tp += hit[i];
        prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    double ap = 0.0;
    for (size_t i = 0; i < all.size(); ++i) {
        if (!hit[i]) continue;
        double env = 0.0;
        for (size_t j = i; j < all.size(); ++j) env = std::max(env, prec[j]);
        ap += env / static_cast<double>(n_gt);
    }
    return ap;
}

}  // namespace

TEST_CASE("miou hand cases") {
    Tensor gt({2, 2}, {0, 0, 1, 1});
    CHECK(miou({gt}, {gt}, 2).miou == doctest::Approx(1.0f));

    Tensor pred({2, 2}, {0, 1, 1, 1});
    MiouResult r = miou({pred}, {gt}, 2);
    CHECK(r.per_class[0] == doctest::Approx(0.5f));        // tp 1, fp 0, fn 1
    CHECK(r.per_class[1] == doctest::Approx(2.0f / 3.0f));  // tp 2, fp 1, fn 0
    CHECK(r.miou == doctest::Approx(7.0f / 12.0f));

    // class 2 never appears in gt: excluded from the mean, flagged absent
    MiouResult r3 = miou({pred}, {gt}, 3);
    CHECK(r3.miou == doctest::Approx(7.0f / 12.0f));
    CHECK_FALSE(r3.present[2]);
    CHECK(r3.per_class[2] == -1.0f);

    // ignored pixels are invisible to both sides
    Tensor gt_ign({2, 2}, {0, 255, 1, 1});
    Tensor pred_ign({2, 2}, {0, 1, 1, 1});
    MiouResult ri = miou({pred_ign}, {gt_ign}, 2);
    CHECK(ri.per_class[0] == doctest::Approx(1.0f));
    CHECK(ri.per_class[1] == doctest::Approx(1.0f));

    CHECK_THROWS_AS(miou({pred}, {Tensor::zeros({3, 3})}, 2), ValidationError);
    CHECK_THROWS_AS(miou({Tensor::full({2, 2}, 255.0f)}, {Tensor::full({2, 2}, 255.0f)}, 2),
                    ValidationError);
    Tensor bad({2, 2}, {0, 5, 0, 0});
    CHECK_THROWS_AS(miou({pred}, {bad}, 2), ValidationError);
}

TEST_CASE("miou matches a set-based oracle on random masks") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        int k = static_cast<int>(rng.uniform_int(2, 5));
        int n_img = static_cast<int>(rng.uniform_int(1, 3));
        std::vector<Tensor> preds, gts;
        for (int im = 0; im < n_img; ++im) {
            Tensor p({8, 8}), g({8, 8});
            for (int i = 0; i < 64; ++i) {
                p[i] = static_cast<float>(rng.uniform_int(0, k - 1));
                // sprinkle ignored pixels into the ground truth
                g[i] = rng.uniform() < 0.1 ? 255.0f
                                           : static_cast<float>(rng.uniform_int(0, k - 1));
            }
            preds.push_back(p);
            gts.push_back(g);
        }
        bool any_gt = false;
        for (const auto& g : gts)
            for (std::int64_t i = 0; i < g.numel(); ++i)
                if (g[i] != 255.0f) any_gt = true;
        if (!any_gt) continue;
        float got = miou(preds, gts, k).miou;
        float want = oracle_miou(preds, gts, k, 255);
        CHECK(got == doctest::Approx(want).epsilon(1e-10));
    }
}

TEST_CASE("depth metrics hand cases") {
    Tensor gt({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    Tensor ones = Tensor::full({2, 2}, 1.0f);

    DepthMetrics exact = depth_metrics(gt, gt, ones);
    CHECK(exact.rmse == doctest::Approx(0.0f));
    CHECK(exact.delta1 == doctest::Approx(1.0f));
    CHECK(exact.delta2 == doctest::Approx(1.0f));
    CHECK(exact.delta3 == doctest::Approx(1.0f));
    CHECK(exact.rel == doctest::Approx(0.0f));
    CHECK(exact.log10 == doctest::Approx(0.0f));

    Tensor scaled = gt;
    for (int i = 0; i < 4; ++i) scaled[i] *= 1.3f;
    DepthMetrics m = depth_metrics(scaled, gt, ones);
    CHECK(m.delta1 == doctest::Approx(0.0f));  // 1.3 > 1.25
    CHECK(m.delta2 == doctest::Approx(1.0f));  // 1.3 < 1.5625
    CHECK(m.delta3 == doctest::Approx(1.0f));
    CHECK(m.rel == doctest::Approx(0.3f).epsilon(1e-5));
    CHECK(m.log10 == doctest::Approx(std::log10(1.3)).epsilon(1e-5));

    CHECK_THROWS_AS(depth_metrics(gt, gt, Tensor::zeros({2, 2})), ValidationError);
    CHECK_THROWS_AS(depth_metrics(gt, Tensor::zeros({2, 2}), ones), ValidationError);
    CHECK_THROWS_AS(depth_metrics(gt, gt, Tensor::zeros({3})), ValidationError);
}

TEST_CASE("depth metrics match a double-precision oracle") {
    Rng rng(404);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor p({4, 4}), g({4, 4}), v({4, 4});
        int n_valid = 0;
        for (int i = 0; i < 16; ++i) {
            p[i] = static_cast<float>(rng.uniform(0.2, 8.0));
            g[i] = static_cast<float>(rng.uniform(0.2, 8.0));
            v[i] = rng.uniform() < 0.8 ? 1.0f : 0.0f;
            if (v[i] != 0.0f) ++n_valid;
        }
        if (n_valid == 0) continue;
        DepthMetrics m = depth_metrics(p, g, v);

        double se = 0, rel = 0, l10 = 0;
        int d1 = 0, d2 = 0, d3 = 0;
        for (int i = 0; i < 16; ++i) {
            if (v[i] == 0.0f) continue;
            double pp = p[i], gg = g[i];
            se += (pp - gg) * (pp - gg);
            rel += std::fabs(pp - gg) / gg;
            l10 += std::fabs(std::log10(pp) - std::log10(gg));
            double ratio = std::max(pp / gg, gg / pp);
            d1 += ratio < 1.25;
            d2 += ratio < 1.5625;
            d3 += ratio < 1.953125;
        }
        CHECK(m.rmse == doctest::Approx(std::sqrt(se / n_valid)).epsilon(1e-6));
        CHECK(m.rel == doctest::Approx(rel / n_valid).epsilon(1e-6));
        CHECK(m.log10 == doctest::Approx(l10 / n_valid).epsilon(1e-6));
        CHECK(m.delta1 == doctest::Approx(static_cast<double>(d1) / n_valid));
        CHECK(m.delta2 == doctest::Approx(static_cast<double>(d2) / n_valid));
        CHECK(m.delta3 == doctest::Approx(static_cast<double>(d3) / n_valid));
    }
}

TEST_CASE("detection ap hand cases") {
    // identical prediction: perfect at every threshold
    std::vector<std::vector<DetBox>> gt{{{2, 2, 20, 20, 0, 1.0f}}};
    std::vector<std::vector<DetBox>> same{{{2, 2, 20, 20, 0, 0.9f}}};
    ApResult perfect = detection_ap(same, gt);
    CHECK(perfect.ap == doctest::Approx(1.0f));
    CHECK(perfect.ap50 == doctest::Approx(1.0f));

    // IoU just above 0.6: true positive at thresholds 0.50, 0.55, 0.60 only
    std::vector<std::vector<DetBox>> gt2{{{0, 0, 10, 10, 0, 1.0f}}};
    std::vector<std::vector<DetBox>> off{{{0, 2.4f, 10, 12.4f, 0, 0.8f}}};
    float iou = heads::box_iou(off[0][0], gt2[0][0]);
    CHECK(iou == doctest::Approx(76.0f / 124.0f).epsilon(1e-5));
    ApResult part = detection_ap(off, gt2);
    CHECK(part.ap == doctest::Approx(0.3f).epsilon(1e-6));
    CHECK(part.ap50 == doctest::Approx(1.0f));

    // no predictions at all
    ApResult none = detection_ap({{}}, gt);
    CHECK(none.ap == doctest::Approx(0.0f));

    // class with predictions but no ground truth stays out of the mean
    std::vector<std::vector<DetBox>> extra{{{2, 2, 20, 20, 0, 0.9f}, {0, 0, 5, 5, 1, 0.7f}}};
    ApResult skip = detection_ap(extra, gt);
    CHECK(skip.ap == doctest::Approx(1.0f));
    CHECK(skip.per_class_ap[1] == -1.0f);

    CHECK_THROWS_AS(detection_ap({{}, {}}, gt), ValidationError);
    CHECK_THROWS_AS(detection_ap(same, gt, {1.5f}), ValidationError);
}

TEST_CASE("detection ap three-image handmade scenario") {
    // 5 gt boxes over 3 images, mixed hits, misses, and a duplicate detection
    std::vector<std::vector<DetBox>> gts{
        {{0, 0, 10, 10, 0, 1}, {20, 20, 30, 30, 0, 1}},
        {{5, 5, 15, 15, 0, 1}, {0, 0, 8, 8, 1, 1}},
        {{10, 0, 26, 16, 1, 1}},
    };
    std::vector<std::vector<DetBox>> preds{
        {{0, 0, 10, 10, 0, 0.95f}, {21, 21, 31, 31, 0, 0.6f}, {0, 0, 10, 10, 0, 0.4f}},
        {{5, 6, 15, 16, 0, 0.8f}, {40, 40, 50, 50, 1, 0.3f}},
        {{11, 1, 27, 17, 1, 0.7f}},
    };
    ApResult got = detection_ap(preds, gts);
    auto thresholds = coco_iou_thresholds();
    for (int cls = 0; cls < 2; ++cls) {
        double acc = 0.0;
        for (float t : thresholds) acc += oracle_ap_class(preds, gts, cls, t);
        CHECK(got.per_class_ap[static_cast<size_t>(cls)] ==
              doctest::Approx(static_cast<float>(acc / thresholds.size())).epsilon(1e-7));
    }
    double want50 = (oracle_ap_class(preds, gts, 0, 0.5f) + oracle_ap_class(preds, gts, 1, 0.5f)) / 2;
    CHECK(got.ap50 == doctest::Approx(static_cast<float>(want50)).epsilon(1e-7));
}

TEST_CASE("detection ap matches the oracle on random scenes") {
    Rng rng(888);
    auto thresholds = coco_iou_thresholds();
    for (int trial = 0; trial < 100; ++trial) {
        int n_img = static_cast<int>(rng.uniform_int(1, 3));
        std::vector<std::vector<DetBox>> preds(static_cast<size_t>(n_img));
        std::vector<std::vector<DetBox>> gts(static_cast<size_t>(n_img));
        auto random_box = [&](bool scored) {
            DetBox b;
            b.x0 = static_cast<float>(rng.uniform(0.0, 24.0));
            b.y0 = static_cast<float>(rng.uniform(0.0, 24.0));
            b.x1 = b.x0 + static_cast<float>(rng.uniform(2.0, 10.0));
            b.y1 = b.y0 + static_cast<float>(rng.uniform(2.0, 10.0));
            b.cls = static_cast<int>(rng.uniform_int(0, 2));
            b.score = scored ? static_cast<float>(rng.uniform()) : 1.0f;
            return b;
        };
        bool any_gt = false;
        for (int im = 0; im < n_img; ++im) {
            int np = static_cast<int>(rng.uniform_int(0, 5));
            int ng = static_cast<int>(rng.uniform_int(0, 4));
            for (int i = 0; i < np; ++i) preds[static_cast<size_t>(im)].push_back(random_box(true));
            for (int i = 0; i < ng; ++i) {
                gts[static_cast<size_t>(im)].push_back(random_box(false));
                any_gt = true;
            }
        }
        if (!any_gt) continue;

        ApResult got = detection_ap(preds, gts);
        double sum = 0.0;
        int counted = 0;
        for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            bool has = false;
            for (float t : thresholds) {
                double ap = oracle_ap_class(preds, gts, c, t);
                if (ap < 0.0) break;
                has = true;
                acc += ap;
            }
            if (!has) continue;
            sum += acc / thresholds.size();
            ++counted;
        }
        CHECK(got.ap ==
              doctest::Approx(static_cast<float>(counted ? sum / counted : 0.0)).epsilon(1e-7));
    }
}

TEST_CASE("pearson correlation") {
    CHECK(*pearson_r({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0));
    CHECK(*pearson_r({1, 2, 3}, {6, 4, 2}) == doctest::Approx(-1.0));
    CHECK_FALSE(pearson_r({1, 2, 3}, {5, 5, 5}).has_value());  // zero variance
    CHECK_FALSE(pearson_r({1}, {2}).has_value());
    CHECK_THROWS_AS(pearson_r({1, 2}, {1}), ValidationError);

    Rng rng(19);
    std::vector<float> x, y;
    for (int i = 0; i < 50; ++i) {
        x.push_back(static_cast<float>(rng.normal()));
        y.push_back(0.5f * x.back() + static_cast<float>(rng.normal()) * 0.1f);
    }
    double mx = 0, my = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= 50;
    my /= 50;
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    CHECK(*pearson_r(x, y) == doctest::Approx(sxy / std::sqrt(sxx * syy)).epsilon(1e-9));
    CHECK(*pearson_r(x, y) > 0.9);
}
