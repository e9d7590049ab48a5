#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <set>
#include <sstream>

#include "tadp/captions.hpp"
#include "tadp/config.hpp"
#include "tadp/dataset.hpp"
#include "tadp/domain.hpp"
#include "tadp/error.hpp"
#include "tadp/train_eval.hpp"
#include "tadp/viz.hpp"

namespace fs = std::filesystem;
using namespace tadp;

namespace {

struct Common {
    std::string config_path;
    int seed = 0;
    std::string output;
    std::string fixture_dir;
    std::string backbone;
    int jobs = 1;
};

void add_common(CLI::App* sub, Common& c, bool config_required = true) {
    auto* opt = sub->add_option("-c,--config", c.config_path, "experiment config file (json)");
    if (config_required) opt->required();
    sub->add_option("--seed", c.seed, "override the config seed");
    sub->add_option("--output", c.output, "override the output directory");
    sub->add_option("--fixture-dir", c.fixture_dir,
                    "fixture directory for the caption/cleaner clients");
    sub->add_option("--jobs", c.jobs, "parallel client calls for batch subcommands")
        ->check(CLI::PositiveNumber);
    sub->add_option("--backbone", c.backbone, "override the backbone spec (real:path | stub:seed)");
}

cfg::ExperimentConfig load_config(const CLI::App* sub, const Common& m) {
    cfg::ExperimentConfig c = cfg::ExperimentConfig::load(m.config_path);
    if (sub->count("--seed")) c.seed = m.seed;
    if (!m.output.empty()) c.output = m.output;
    if (!m.backbone.empty()) c.backbone = m.backbone;
    c.validate();
    return c;
}

cap::ClientConfig client_config(const char* endpoint_env, const std::string& fixture_flag) {
    cap::ClientConfig cc;
    if (const char* e = std::getenv(endpoint_env)) cc.endpoint = e;
    if (const char* f = std::getenv("TADP_FIXTURE_DIR")) cc.fixture_dir = f;
    if (!fixture_flag.empty()) cc.fixture_dir = fixture_flag;
    return cc;
}

fs::path run_dir_for(const cfg::ExperimentConfig& c) { return fs::path(c.output) / c.name; }

std::string join_tokens(const std::vector<std::string>& parts, char sep) {
    std::string out;
    for (const auto& p : parts) {
        if (!out.empty()) out += sep;
        out += p;
    }
    return out;
}

std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        size_t b = item.find_first_not_of(" \t");
        size_t e = item.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

int cmd_synth(const std::string& task, const std::string& root, int images, int classes,
              std::uint64_t seed, int image_size) {
    data::synth_dataset(root, data::task_from_name(task), images, classes, seed, image_size);
    std::cerr << "wrote " << images << " " << task << " images to " << root << "\n";
    return 0;
}

int cmd_caption(const CLI::App* sub, const Common& m) {
    cfg::ExperimentConfig c = load_config(sub, m);
    auto dataset = data::open_dataset(c.dataset.root);
    cap::CaptionCache cache = tr::open_caption_cache(c);
    cap::CaptionerClient client(client_config("TADP_CAPTION_ENDPOINT", m.fixture_dir));
    cap::BatchReport rep =
        cap::batch_caption(dataset->ids(), c.builder.min_tokens, client, cache, m.jobs);
    cache.save();
    std::cerr << "captioned " << rep.newly_captioned << " images (" << rep.from_cache
              << " already cached) into " << cache.path() << "\n";
    if (!rep.failures.empty()) {
        for (const auto& [id, reason] : rep.failures)
            std::cerr << "failed " << id << ": " << reason << "\n";
        return 2;
    }
    return 0;
}

int cmd_clean(const CLI::App* sub, const Common& m, const std::string& domain_flag) {
    cfg::ExperimentConfig c = load_config(sub, m);
    const std::string domain = domain_flag.empty() ? c.modifier.domain : domain_flag;
    if (domain.empty())
        throw ValidationError("clean needs a target domain (--domain or modifier.domain)");
    cap::CaptionCache cache = tr::open_caption_cache(c);
    if (cache.size() == 0)
        throw ValidationError("caption cache at " + cache.path() + " is empty; run caption first");
    cap::CleanerClient cleaner(client_config("TADP_CLEANER_ENDPOINT", m.fixture_dir));

    std::vector<cap::CaptionRecord> records;
    for (const auto& [id, rec] : cache.records()) records.push_back(rec);
    const int jobs = std::min<int>(m.jobs, static_cast<int>(records.size()));
    if (jobs > 1) {
        std::vector<std::future<void>> futs;
        std::atomic<size_t> next{0};
        for (int j = 0; j < jobs; ++j)
            futs.push_back(std::async(std::launch::async, [&] {
                for (size_t i = next++; i < records.size(); i = next++)
                    records[i].cleaned = cleaner.clean_caption(records[i].caption, domain);
            }));
        for (auto& f : futs) f.get();
    } else {
        for (auto& rec : records) rec.cleaned = cleaner.clean_caption(rec.caption, domain);
    }
    for (auto& rec : records) cache.put(std::move(rec));
    cache.save();
    std::cerr << "cleaned " << records.size() << " captions for domain '" << domain << "' in "
              << cache.path() << "\n";
    return 0;
}

int cmd_personalize(const CLI::App* sub, const Common& m, const std::string& images_dir,
                    int steps_flag, double lr_flag) {
    cfg::ExperimentConfig c = load_config(sub, m);
    const std::string kind = c.modifier.kind;
    if (kind != "textual_inversion" && kind != "dreambooth")
        throw ValidationError("personalize needs modifier.kind textual_inversion or dreambooth, got '" +
                              kind + "'");
    if (c.modifier.domain.empty()) throw ValidationError("personalize needs modifier.domain");

    std::vector<std::string> images;
    for (const auto& e : fs::directory_iterator(images_dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
            images.push_back(e.path().string());
    std::sort(images.begin(), images.end());
    if (images.empty()) throw ValidationError("no .png images under " + images_dir);

    domain::PersonalizationConfig p = kind == "textual_inversion"
                                          ? domain::PersonalizationConfig::ti_defaults()
                                          : domain::PersonalizationConfig::db_defaults();
    p.image_set = images;
    p.seed = static_cast<std::uint64_t>(c.seed);
    if (sub->count("--steps")) p.steps = steps_flag;
    if (sub->count("--lr")) p.learning_rate = static_cast<float>(lr_flag);

    bb::Backbone backbone = tr::load_backbone_spec(c.backbone);
    text::TextEncoder enc(backbone.config().embed_dim, backbone.config().max_text_tokens);
    const fs::path out_dir = run_dir_for(c);
    fs::create_directories(out_dir);

    if (kind == "textual_inversion") {
        domain::LearnedToken token =
            domain::train_textual_inversion(p, backbone, enc, "a <*> style painting of a scene");
        const std::string path = domain::token_path(out_dir.string(), c.modifier.domain);
        token.save(path);
        std::cerr << "saved learned token '" << token.token << "' to " << path << "\n";
    } else {
        domain::DreamBoothResult res = domain::train_dreambooth(
            p, backbone, enc, "a <SKS> style painting of a scene", out_dir.string());
        const std::string path =
            (out_dir / (c.modifier.domain + "_db.token")).string();
        res.token.save(path);
        std::cerr << "saved learned token '" << res.token.token << "' to " << path
                  << " and tuned backbone to " << res.checkpoint_path << "\n";
    }
    return 0;
}

int cmd_train(const CLI::App* sub, const Common& m) {
    cfg::ExperimentConfig c = load_config(sub, m);
    tr::TrainResult res = tr::train(c);
    std::cerr << "trained " << res.steps << " steps, loss " << res.first_loss << " -> "
              << res.final_loss << ", run dir " << res.run_dir << "\n";
    for (const auto& [k, v] : res.eval.metrics) std::cerr << "  " << k << " = " << v << "\n";
    return 0;
}

int cmd_eval(const CLI::App* sub, const Common& m) {
    cfg::ExperimentConfig c = load_config(sub, m);
    tr::MetricReport report = tr::evaluate(c);
    const fs::path run_dir = run_dir_for(c);
    fs::create_directories(run_dir);
    {
        std::ofstream out(run_dir / "report.json", std::ios::binary);
        out << report.to_json();
    }
    std::cerr << "wrote " << (run_dir / "report.json").string() << "\n";
    for (const auto& [k, v] : report.metrics) std::cerr << "  " << k << " = " << v << "\n";
    return 0;
}

void write_csv(const fs::path& path, const std::string& header,
               const std::vector<std::string>& rows) {
    std::ofstream out(path, std::ios::binary);
    out << header << "\n";
    for (const auto& r : rows) out << r << "\n";
}

int cmd_analyze(const CLI::App* sub, const Common& m, const std::string& what,
                const std::string& image_id, const std::string& tokens_csv) {
    cfg::ExperimentConfig c = load_config(sub, m);
    const fs::path out_dir = run_dir_for(c) / "analysis";

    if (what == "attention") {
        if (image_id.empty()) throw ValidationError("analyze attention needs --image");
        const std::vector<std::string> tokens = split_csv(tokens_csv);
        if (tokens.empty()) throw ValidationError("analyze attention needs --tokens");
        auto dataset = data::open_dataset(c.dataset.root);
        data::Sample s = dataset->load(image_id);
        bb::Backbone backbone = tr::load_backbone_spec(c.backbone);
        text::TextEncoder enc(backbone.config().embed_dim, backbone.config().max_text_tokens);
        std::vector<tr::AttentionPanel> panels =
            tr::copy_paste_probe(s.image, tokens, {}, backbone, enc);
        int written = 0;
        for (size_t i = 0; i < panels.size(); ++i) {
            viz::save_attention_map(out_dir.string(), image_id, static_cast<int>(i),
                                    panels[i].token, panels[i].map);
            ++written;
        }
        std::cerr << "wrote " << written << " attention maps to " << out_dir.string() << "\n";
        return 0;
    }

    if (what == "recall") {
        cap::CaptionCache cache = tr::open_caption_cache(c);
        if (cache.size() == 0)
            throw ValidationError("caption cache at " + cache.path() +
                                  " is empty; run caption first");
        tr::PredBatch batch = tr::predict_segmentation(c);
        auto dataset = data::open_dataset(c.dataset.root);
        const std::vector<std::string> names = dataset->class_names();

        std::map<std::string, std::string> captions;
        std::map<std::string, std::vector<int>> present;
        std::map<std::string, double> miou;
        for (size_t i = 0; i < batch.ids.size(); ++i) {
            const std::string& id = batch.ids[i];
            auto rec = cache.get(id);
            if (!rec) throw ValidationError("no cached caption for image '" + id + "'");
            captions[id] = rec->cleaned.value_or(rec->caption);
            std::set<int> classes;
            const nn::Tensor& gt = batch.gts[i];
            for (std::int64_t px = 0; px < gt.numel(); ++px) {
                int v = static_cast<int>(gt[px]);
                if (v != dataset->ignore_index() && v >= 0) classes.insert(v);
            }
            present[id] = std::vector<int>(classes.begin(), classes.end());
            miou[id] = batch.miou[i];
        }
        bb::Backbone backbone = tr::load_backbone_spec(c.backbone);
        text::TextEncoder enc(backbone.config().embed_dim, backbone.config().max_text_tokens);
        tr::RecallAnalysis res = tr::caption_recall_analysis(captions, present, names, enc, miou);

        fs::create_directories(out_dir);
        std::vector<std::string> rows;
        std::vector<double> xs, ys;
        for (const auto& r : res.rows) {
            std::ostringstream row;
            row << r.image_id << "," << r.recall << "," << r.miou << ",\""
                << join_tokens(r.missing, ';') << "\"";
            rows.push_back(row.str());
            xs.push_back(r.recall);
            ys.push_back(r.miou);
        }
        write_csv(out_dir / "recall.csv", "image_id,recall,miou,missing", rows);
        viz::scatter_plot((out_dir / "recall.png").string(),
                          {"caption recall vs miou", "recall", "miou"}, xs, ys);
        std::cerr << "wrote " << (out_dir / "recall.csv").string() << " ("
                  << res.rows.size() << " rows)";
        if (res.correlation) std::cerr << ", pearson r = " << *res.correlation;
        std::cerr << "\n";
        return 0;
    }

    if (what == "size") {
        tr::PredBatch batch = tr::predict_segmentation(c);
        auto dataset = data::open_dataset(c.dataset.root);
        tr::SizeAnalysis res = tr::object_size_analysis(batch.ids, batch.preds, batch.gts,
                                                        dataset->num_classes(),
                                                        dataset->ignore_index());
        fs::create_directories(out_dir);
        std::vector<std::string> rows;
        std::vector<double> xs, ys;
        for (const auto& r : res.rows) {
            std::ostringstream row;
            row << r.image_id << "," << r.cls << "," << r.rel_size << "," << r.iou;
            rows.push_back(row.str());
            xs.push_back(r.rel_size);
            ys.push_back(r.iou);
        }
        write_csv(out_dir / "object_size.csv", "image_id,class,rel_size,iou", rows);
        viz::scatter_plot((out_dir / "object_size.png").string(),
                          {"object size vs iou", "relative size", "iou"}, xs, ys);
        std::cerr << "wrote " << (out_dir / "object_size.csv").string() << " ("
                  << res.rows.size() << " rows)";
        if (res.correlation) std::cerr << ", pearson r = " << *res.correlation;
        std::cerr << "\n";
        return 0;
    }

    if (what == "confusion") {
        tr::ConfusionPair pair = tr::pixel_confusion(c);
        auto dataset = data::open_dataset(c.dataset.root);
        const std::vector<std::string> names = dataset->class_names();
        fs::create_directories(out_dir);
        const int K = pair.oracle.dim(0);
        auto dump = [&](const nn::Tensor& mat, const std::string& stem) {
            std::vector<std::string> rows;
            for (int r = 0; r < K; ++r) {
                std::ostringstream row;
                row << names[static_cast<size_t>(r)];
                for (int col = 0; col < K; ++col) row << "," << mat.at(r, col);
                rows.push_back(row.str());
            }
            write_csv(out_dir / (stem + ".csv"), "gt_class," + join_tokens(names, ','), rows);
            viz::heatmap((out_dir / (stem + ".png")).string(), {stem, "", ""}, mat, names, names);
        };
        dump(pair.oracle, "confusion_oracle");
        dump(pair.all_names, "confusion_all_names");
        std::cerr << "wrote confusion matrices and heatmaps to " << out_dir.string() << "\n";
        return 0;
    }

    throw ValidationError("unknown analysis '" + what +
                          "' (expected attention, recall, size, or confusion)");
}

int cmd_plot(const CLI::App* sub, const Common& m, const std::string& run_flag) {
    std::string run_dir = run_flag;
    if (run_dir.empty()) {
        if (m.config_path.empty())
            throw ValidationError("plot needs --run or a config with an output directory");
        cfg::ExperimentConfig c = load_config(sub, m);
        run_dir = run_dir_for(c).string();
    }
    viz::EmitResult res = viz::emit_plots(run_dir);
    std::cerr << "wrote " << res.csv_path << " (" << res.records << " records) and "
              << res.png_paths.size() << " figures\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"text-conditioned diffusion features for dense prediction"};
    app.require_subcommand(1);

    Common m;
    std::string synth_task = "segmentation", synth_root;
    int synth_images = 16, synth_classes = 3, synth_size = 64;
    std::uint64_t synth_seed = 0;
    std::string domain_flag, images_dir, analyze_what, image_flag, tokens_flag, run_flag;
    int steps_flag = 0;
    double lr_flag = 0.0;

    CLI::App* synth = app.add_subcommand("synth", "write a deterministic shape dataset");
    synth->add_option("--task", synth_task, "segmentation | depth | detection");
    synth->add_option("--root", synth_root, "output directory")->required();
    synth->add_option("--images", synth_images, "image count");
    synth->add_option("--classes", synth_classes, "class count (including backdrop for seg)");
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--image-size", synth_size, "square image side in pixels");

    CLI::App* caption = app.add_subcommand("caption", "fill the caption cache for a dataset");
    CLI::App* clean = app.add_subcommand("clean", "strip domain mentions from cached captions");
    clean->add_option("--domain", domain_flag, "target domain (defaults to modifier.domain)");
    CLI::App* personalize =
        app.add_subcommand("personalize", "learn a domain token (and optionally tune the backbone)");
    personalize->add_option("--images-dir", images_dir, "directory of target-domain .png images")
        ->required();
    personalize->add_option("--steps", steps_flag, "override the preset step count");
    personalize->add_option("--lr", lr_flag, "override the preset learning rate");
    CLI::App* train = app.add_subcommand("train", "train a head on diffusion features");
    CLI::App* eval = app.add_subcommand("eval", "score a configured experiment");
    CLI::App* analyze = app.add_subcommand("analyze", "run one of the conditioning analyses");
    analyze->add_option("what", analyze_what, "attention | recall | size | confusion")->required();
    analyze->add_option("--image", image_flag, "image id for attention maps");
    analyze->add_option("--tokens", tokens_flag, "comma-separated prompt tokens");
    CLI::App* plot = app.add_subcommand("plot", "render metrics.jsonl into figures and csv");
    plot->add_option("--run", run_flag, "run directory (defaults to the config's)");

    for (CLI::App* sub : {caption, clean, personalize, train, eval, analyze})
        add_common(sub, m);
    add_common(plot, m, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed())
            return cmd_synth(synth_task, synth_root, synth_images, synth_classes, synth_seed,
                             synth_size);
        if (caption->parsed()) return cmd_caption(caption, m);
        if (clean->parsed()) return cmd_clean(clean, m, domain_flag);
        if (personalize->parsed())
            return cmd_personalize(personalize, m, images_dir, steps_flag, lr_flag);
        if (train->parsed()) return cmd_train(train, m);
        if (eval->parsed()) return cmd_eval(eval, m);
        if (analyze->parsed()) return cmd_analyze(analyze, m, analyze_what, image_flag, tokens_flag);
        if (plot->parsed()) return cmd_plot(plot, m, run_flag);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
