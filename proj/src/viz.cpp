#include "tadp/viz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "tadp/error.hpp"

namespace tadp::viz {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

const cv::Scalar kBackground(255, 255, 255);
const cv::Scalar kAxis(40, 40, 40);
const cv::Scalar kGrid(225, 225, 225);
const std::vector<cv::Scalar> kPalette = {
    {180, 90, 30}, {40, 130, 230}, {80, 170, 60}, {160, 60, 160}, {60, 60, 200},
};

constexpr int kMarginLeft = 60;
constexpr int kMarginRight = 16;
constexpr int kMarginTop = 30;
constexpr int kMarginBottom = 46;

std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

std::string fmt_full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

struct Frame {
    cv::Mat img;
    double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
    int px_lo, px_hi, py_lo, py_hi;  // plot rectangle in pixels

    int px(double x) const {
        double t = (x - x_lo) / (x_hi - x_lo);
        return px_lo + static_cast<int>(std::lround(t * (px_hi - px_lo)));
    }
    int py(double y) const {
        double t = (y - y_lo) / (y_hi - y_lo);
        return py_hi - static_cast<int>(std::lround(t * (py_hi - py_lo)));
    }
};

void pad_range(double& lo, double& hi) {
    if (!(hi > lo)) {
        double mid = lo;
        lo = mid - 1.0;
        hi = mid + 1.0;
        return;
    }
    double pad = (hi - lo) * 0.05;
    lo -= pad;
    hi += pad;
}

void put_label(cv::Mat& img, const std::string& text, cv::Point at, double scale = 0.38) {
    cv::putText(img, text, at, cv::FONT_HERSHEY_SIMPLEX, scale, kAxis, 1, cv::LINE_8);
}

Frame open_frame(const ChartSpec& spec, double x_lo, double x_hi, double y_lo, double y_hi) {
    if (spec.width < 160 || spec.height < 120)
        throw ValidationError("chart size must be at least 160x120");
    Frame f;
    f.img = cv::Mat(spec.height, spec.width, CV_8UC3, kBackground);
    f.x_lo = x_lo;
    f.x_hi = x_hi;
    f.y_lo = y_lo;
    f.y_hi = y_hi;
    f.px_lo = kMarginLeft;
    f.px_hi = spec.width - kMarginRight;
    f.py_lo = kMarginTop;
    f.py_hi = spec.height - kMarginBottom;

    for (int i = 0; i <= 4; ++i) {
        double ty = y_lo + (y_hi - y_lo) * i / 4.0;
        int y = f.py(ty);
        cv::line(f.img, {f.px_lo, y}, {f.px_hi, y}, kGrid, 1, cv::LINE_8);
        put_label(f.img, fmt_num(ty), {4, y + 4});
    }
    cv::rectangle(f.img, {f.px_lo, f.py_lo}, {f.px_hi, f.py_hi}, kAxis, 1, cv::LINE_8);
    if (!spec.title.empty()) put_label(f.img, spec.title, {kMarginLeft, 18}, 0.45);
    if (!spec.x_label.empty())
        put_label(f.img, spec.x_label, {(f.px_lo + f.px_hi) / 2 - 20, spec.height - 8});
    if (!spec.y_label.empty()) put_label(f.img, spec.y_label, {4, kMarginTop - 8});
    return f;
}

void x_ticks(Frame& f, int count = 5) {
    for (int i = 0; i < count; ++i) {
        double tx = f.x_lo + (f.x_hi - f.x_lo) * i / (count - 1.0);
        int x = f.px(tx);
        cv::line(f.img, {x, f.py_hi}, {x, f.py_hi + 4}, kAxis, 1, cv::LINE_8);
        put_label(f.img, fmt_num(tx), {x - 14, f.py_hi + 18});
    }
}

void write_png(const std::string& path, const cv::Mat& img) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    if (!cv::imwrite(path, img, {cv::IMWRITE_PNG_COMPRESSION, 3}))
        throw Error("could not write " + path);
}

cv::Vec3b heat_color(float t) {
    t = std::clamp(t, 0.0f, 1.0f);
    auto lerp = [t](int lo, int hi) {
        return static_cast<unsigned char>(std::lround(lo + (hi - lo) * static_cast<double>(t)));
    };
    return {lerp(248, 120), lerp(246, 48), lerp(244, 160)};  // pale -> warm violet, BGR
}

}  // namespace

void line_chart(const std::string& out_png, const ChartSpec& spec,
                const std::vector<Series>& series) {
    if (series.empty()) throw ValidationError("line chart needs at least one series");
    double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo;
    double y_lo = x_lo, y_hi = -x_lo;
    for (const auto& s : series) {
        if (s.xs.size() != s.ys.size())
            throw ValidationError("series '" + s.label + "' has mismatched x/y lengths");
        if (s.xs.empty()) throw ValidationError("series '" + s.label + "' is empty");
        for (double v : s.xs) x_lo = std::min(x_lo, v), x_hi = std::max(x_hi, v);
        for (double v : s.ys) y_lo = std::min(y_lo, v), y_hi = std::max(y_hi, v);
    }
    pad_range(x_lo, x_hi);
    pad_range(y_lo, y_hi);
    Frame f = open_frame(spec, x_lo, x_hi, y_lo, y_hi);
    x_ticks(f);
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const cv::Scalar& color = kPalette[si % kPalette.size()];
        for (size_t i = 1; i < s.xs.size(); ++i)
            cv::line(f.img, {f.px(s.xs[i - 1]), f.py(s.ys[i - 1])}, {f.px(s.xs[i]), f.py(s.ys[i])},
                     color, 1, cv::LINE_8);
        if (!s.label.empty()) {
            int y = kMarginTop + 14 * static_cast<int>(si);
            cv::line(f.img, {f.px_hi - 70, y}, {f.px_hi - 54, y}, color, 2, cv::LINE_8);
            put_label(f.img, s.label, {f.px_hi - 50, y + 4});
        }
    }
    write_png(out_png, f.img);
}

void bar_chart(const std::string& out_png, const ChartSpec& spec,
               const std::vector<std::string>& labels, const std::vector<double>& values) {
    if (values.empty()) throw ValidationError("bar chart needs at least one value");
    if (labels.size() != values.size())
        throw ValidationError("bar chart needs one label per value");
    double y_lo = 0.0, y_hi = *std::max_element(values.begin(), values.end());
    y_lo = std::min(y_lo, *std::min_element(values.begin(), values.end()));
    pad_range(y_lo, y_hi);
    Frame f = open_frame(spec, 0, static_cast<double>(values.size()), y_lo, y_hi);
    int slot = (f.px_hi - f.px_lo) / static_cast<int>(values.size());
    int bar = std::max(4, slot * 7 / 10);
    for (size_t i = 0; i < values.size(); ++i) {
        int cx = f.px_lo + slot * static_cast<int>(i) + slot / 2;
        int top = f.py(values[i]);
        int base = f.py(0.0);
        if (top > base) std::swap(top, base);
        cv::rectangle(f.img, {cx - bar / 2, top}, {cx + bar / 2, base},
                      kPalette[i % kPalette.size()], cv::FILLED, cv::LINE_8);
        put_label(f.img, fmt_num(values[i]), {cx - bar / 2, top - 4});
        std::string name = labels[i].size() > 10 ? labels[i].substr(0, 10) : labels[i];
        put_label(f.img, name, {cx - bar / 2, f.py_hi + 16});
    }
    write_png(out_png, f.img);
}

void scatter_plot(const std::string& out_png, const ChartSpec& spec,
                  const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw ValidationError("scatter needs one y per x");
    if (xs.empty()) throw ValidationError("scatter needs at least one point");
    double x_lo = *std::min_element(xs.begin(), xs.end());
    double x_hi = *std::max_element(xs.begin(), xs.end());
    double y_lo = *std::min_element(ys.begin(), ys.end());
    double y_hi = *std::max_element(ys.begin(), ys.end());
    pad_range(x_lo, x_hi);
    pad_range(y_lo, y_hi);
    Frame f = open_frame(spec, x_lo, x_hi, y_lo, y_hi);
    x_ticks(f);
    for (size_t i = 0; i < xs.size(); ++i)
        cv::circle(f.img, {f.px(xs[i]), f.py(ys[i])}, 3, kPalette[0], cv::FILLED, cv::LINE_8);
    write_png(out_png, f.img);
}

void heatmap(const std::string& out_png, const ChartSpec& spec, const Tensor& matrix,
             const std::vector<std::string>& row_labels,
             const std::vector<std::string>& col_labels) {
    if (matrix.shape().size() != 2) throw ValidationError("heatmap needs a rank-2 matrix");
    int rows = matrix.dim(0), cols = matrix.dim(1);
    if (rows < 1 || cols < 1) throw ValidationError("heatmap matrix must be nonempty");
    if (!row_labels.empty() && static_cast<int>(row_labels.size()) != rows)
        throw ValidationError("heatmap needs one row label per row");
    if (!col_labels.empty() && static_cast<int>(col_labels.size()) != cols)
        throw ValidationError("heatmap needs one column label per column");

    cv::Mat img(spec.height, spec.width, CV_8UC3, kBackground);
    int px_lo = kMarginLeft, px_hi = spec.width - kMarginRight;
    int py_lo = kMarginTop, py_hi = spec.height - kMarginBottom;
    if (!spec.title.empty()) put_label(img, spec.title, {kMarginLeft, 18}, 0.45);
    for (int r = 0; r < rows; ++r) {
        int y0 = py_lo + (py_hi - py_lo) * r / rows;
        int y1 = py_lo + (py_hi - py_lo) * (r + 1) / rows;
        for (int c = 0; c < cols; ++c) {
            int x0 = px_lo + (px_hi - px_lo) * c / cols;
            int x1 = px_lo + (px_hi - px_lo) * (c + 1) / cols;
            cv::Vec3b color = heat_color(matrix.at(r, c));
            cv::rectangle(img, {x0, y0}, {x1 - 1, y1 - 1}, cv::Scalar(color), cv::FILLED,
                          cv::LINE_8);
        }
        if (!row_labels.empty()) {
            std::string name =
                row_labels[static_cast<size_t>(r)].size() > 8
                    ? row_labels[static_cast<size_t>(r)].substr(0, 8)
                    : row_labels[static_cast<size_t>(r)];
            put_label(img, name, {2, (y0 + y1) / 2 + 4}, 0.32);
        }
    }
    if (!col_labels.empty())
        for (int c = 0; c < cols; ++c) {
            int x0 = px_lo + (px_hi - px_lo) * c / cols;
            std::string name = col_labels[static_cast<size_t>(c)].size() > 8
                                   ? col_labels[static_cast<size_t>(c)].substr(0, 8)
                                   : col_labels[static_cast<size_t>(c)];
            put_label(img, name, {x0 + 2, py_hi + 16}, 0.32);
        }
    cv::rectangle(img, {px_lo, py_lo}, {px_hi, py_hi}, kAxis, 1, cv::LINE_8);
    write_png(out_png, img);
}

std::string save_attention_map(const std::string& dir, const std::string& image_id,
                               int token_index, const std::string& token_text,
                               const Tensor& map) {
    if (map.shape().size() != 2) throw ValidationError("attention map must be rank 2");
    if (token_index < 0) throw ValidationError("token index must be nonnegative");
    int rows = map.dim(0), cols = map.dim(1);
    float peak = 0.0f;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) peak = std::max(peak, map.at(r, c));
    cv::Mat small(rows, cols, CV_8UC3);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            small.at<cv::Vec3b>(r, c) = heat_color(peak > 0.0f ? map.at(r, c) / peak : 0.0f);
    int zoom = std::max(1, 256 / std::max(rows, cols));
    cv::Mat big;
    cv::resize(small, big, {cols * zoom, rows * zoom}, 0, 0, cv::INTER_NEAREST);
    fs::create_directories(dir);
    std::string name =
        "attn_" + image_id + "_" + std::to_string(token_index) + "_" + token_text + ".png";
    std::string path = (fs::path(dir) / name).string();
    write_png(path, big);
    return path;
}

EmitResult emit_plots(const std::string& run_dir) {
    fs::path metrics = fs::path(run_dir) / "metrics.jsonl";
    if (!fs::exists(metrics))
        throw ValidationError("no metrics.jsonl under " + run_dir + "; train a run first");
    std::ifstream in(metrics);
    std::vector<json> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ValidationError("metrics.jsonl has a malformed line");
        records.push_back(std::move(j));
    }
    if (records.empty()) throw ValidationError("metrics.jsonl under " + run_dir + " is empty");

    Series loss{"loss", {}, {}}, lr{"lr_mult", {}, {}};
    std::map<std::string, double> last_eval;
    std::ostringstream csv;
    csv << "step,kind,loss,lr_mult,metrics\n";
    for (const json& j : records) {
        double step = j.value("step", 0.0);
        if (j.contains("loss")) {
            loss.xs.push_back(step);
            loss.ys.push_back(j["loss"].get<double>());
            lr.xs.push_back(step);
            lr.ys.push_back(j.value("lr_mult", 0.0));
            csv << fmt_full(step) << ",loss," << fmt_full(loss.ys.back()) << ","
                << fmt_full(lr.ys.back()) << ",\n";
        } else if (j.contains("eval")) {
            std::map<std::string, double> ev = j["eval"].get<std::map<std::string, double>>();
            last_eval = ev;
            csv << fmt_full(step) << ",eval,,,\"";
            bool first = true;
            for (const auto& [k, v] : ev) {
                if (!first) csv << ';';
                first = false;
                csv << k << '=' << fmt_full(v);
            }
            csv << "\"\n";
        } else {
            throw ValidationError("metrics.jsonl line is neither a loss nor an eval record");
        }
    }

    EmitResult out;
    out.records = static_cast<int>(records.size());
    out.csv_path = (fs::path(run_dir) / "metrics.csv").string();
    std::ofstream(out.csv_path, std::ios::binary) << csv.str();

    fs::path plots = fs::path(run_dir) / "plots";
    if (!loss.xs.empty()) {
        std::string p = (plots / "loss.png").string();
        line_chart(p, {"training loss", "step", "loss"}, {loss});
        out.png_paths.push_back(p);
        p = (plots / "lr_mult.png").string();
        line_chart(p, {"learning rate multiplier", "step", "lr mult"}, {lr});
        out.png_paths.push_back(p);
    }
    if (!last_eval.empty()) {
        std::vector<std::string> names;
        std::vector<double> values;
        for (const auto& [k, v] : last_eval) {
            names.push_back(k);
            values.push_back(v);
        }
        std::string p = (plots / "eval_metrics.png").string();
        bar_chart(p, {"evaluation metrics", "", ""}, names, values);
        out.png_paths.push_back(p);
    }
    return out;
}

}  // namespace tadp::viz
