#include "tadp/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "tadp/error.hpp"
#include "tadp/image_io.hpp"
#include "tadp/rng.hpp"

namespace fs = std::filesystem;

namespace tadp::data {

std::string task_name(heads::Task t) {
    switch (t) {
        case heads::Task::Segmentation: return "segmentation";
        case heads::Task::Depth: return "depth";
        case heads::Task::Detection: return "detection";
    }
    throw Error("unknown task enum");
}

heads::Task task_from_name(const std::string& s) {
    if (s == "segmentation") return heads::Task::Segmentation;
    if (s == "depth") return heads::Task::Depth;
    if (s == "detection") return heads::Task::Detection;
    throw ValidationError("unknown task '" + s + "' (expected segmentation, depth, or detection)");
}

namespace {

// shape kind k: 0 square, 1 circle, 2 triangle, 3 diamond, 4 bar
const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> names = {"square", "circle", "triangle", "diamond", "bar"};
    return names;
}

const std::vector<cv::Vec3b>& shape_colors() {  // BGR, one per kind
    static const std::vector<cv::Vec3b> colors = {
        {60, 60, 230}, {80, 200, 60}, {230, 140, 40}, {40, 210, 230}, {200, 80, 200}};
    return colors;
}

struct ShapeSpec {
    int kind = 0;
    int cls = 0;  // dataset class index
    int cx = 0, cy = 0, s = 0;
    float depth_m = 0.0f;
};

void draw_stencil(cv::Mat& st, const ShapeSpec& sp) {
    switch (sp.kind) {
        case 0:
            cv::rectangle(st, {sp.cx - sp.s, sp.cy - sp.s}, {sp.cx + sp.s, sp.cy + sp.s},
                          cv::Scalar(255), cv::FILLED);
            break;
        case 1:
            cv::circle(st, {sp.cx, sp.cy}, sp.s, cv::Scalar(255), cv::FILLED);
            break;
        case 2: {
            std::vector<cv::Point> v = {{sp.cx, sp.cy - sp.s},
                                        {sp.cx - sp.s, sp.cy + sp.s},
                                        {sp.cx + sp.s, sp.cy + sp.s}};
            cv::fillConvexPoly(st, v, cv::Scalar(255));
            break;
        }
        case 3: {
            std::vector<cv::Point> v = {{sp.cx, sp.cy - sp.s},
                                        {sp.cx + sp.s, sp.cy},
                                        {sp.cx, sp.cy + sp.s},
                                        {sp.cx - sp.s, sp.cy}};
            cv::fillConvexPoly(st, v, cv::Scalar(255));
            break;
        }
        default:
            cv::rectangle(st, {sp.cx - sp.s, sp.cy - sp.s / 2 - 1},
                          {sp.cx + sp.s, sp.cy + sp.s / 2 + 1}, cv::Scalar(255), cv::FILLED);
            break;
    }
}

std::string image_id_for(int i) {
    std::ostringstream os;
    os << "img_" << std::setw(3) << std::setfill('0') << i;
    return os.str();
}

void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << j.dump(2) << "\n";
}

}  // namespace

void synth_dataset(const std::string& root, heads::Task task, int n_images, int n_classes,
                   std::uint64_t seed, int image_size) {
    if (n_images < 1) throw ValidationError("synth_dataset needs at least one image");
    if (image_size < 32) throw ValidationError("synth_dataset image_size must be >= 32");

    const int kinds = static_cast<int>(shape_names().size());
    std::vector<std::string> class_names;
    int fg_classes = 0;  // classes that are shapes
    switch (task) {
        case heads::Task::Segmentation:
            if (n_classes < 2 || n_classes > kinds + 1)
                throw ValidationError("segmentation n_classes must be in [2, " +
                                      std::to_string(kinds + 1) + "]");
            class_names.push_back("backdrop");
            for (int i = 0; i < n_classes - 1; ++i) class_names.push_back(shape_names()[i]);
            fg_classes = n_classes - 1;
            break;
        case heads::Task::Detection:
            if (n_classes < 1 || n_classes > kinds)
                throw ValidationError("detection n_classes must be in [1, " +
                                      std::to_string(kinds) + "]");
            for (int i = 0; i < n_classes; ++i) class_names.push_back(shape_names()[i]);
            fg_classes = n_classes;
            break;
        case heads::Task::Depth:
            fg_classes = kinds;
            break;
    }

    fs::create_directories(fs::path(root) / "images");
    if (task != heads::Task::Depth) fs::create_directories(fs::path(root) / "masks");
    if (task == heads::Task::Depth) fs::create_directories(fs::path(root) / "depth");

    const int S = image_size;
    Rng master(seed);
    std::vector<std::string> ids;
    std::map<std::string, std::vector<heads::DetBox>> all_boxes;

    for (int i = 0; i < n_images; ++i) {
        const std::string id = image_id_for(i);
        ids.push_back(id);
        Rng r = master.fork(static_cast<std::uint64_t>(i));

        const int n_shapes = 1 + static_cast<int>(r.uniform_int(0, 2));
        std::vector<ShapeSpec> shapes;
        for (int j = 0; j < n_shapes; ++j) {
            ShapeSpec sp;
            int fg = (j == 0) ? (i % fg_classes) : static_cast<int>(r.uniform_int(0, fg_classes - 1));
            sp.kind = fg % kinds;
            sp.cls = (task == heads::Task::Segmentation) ? fg + 1 : fg;
            sp.s = static_cast<int>(r.uniform_int(S / 8, S / 5));
            sp.cx = static_cast<int>(r.uniform_int(sp.s + 2, S - 3 - sp.s));
            sp.cy = static_cast<int>(r.uniform_int(sp.s + 2, S - 3 - sp.s));
            sp.depth_m = 1.2f + 2.3f * static_cast<float>(r.uniform());
            shapes.push_back(sp);
        }
        if (task == heads::Task::Depth) {
            std::stable_sort(shapes.begin(), shapes.end(),
                             [](const ShapeSpec& a, const ShapeSpec& b) { return a.depth_m > b.depth_m; });
        }

        const int tint = static_cast<int>(r.uniform_int(0, 16)) - 8;
        const cv::Vec3b bg(static_cast<uchar>(48 + tint), static_cast<uchar>(42 + tint),
                           static_cast<uchar>(38 + tint));
        cv::Mat img(S, S, CV_8UC3, bg);
        cv::Mat owner = cv::Mat::zeros(S, S, CV_32SC1);  // 0 = background, j+1 = shape j
        cv::Mat depth_mm(S, S, CV_16UC1);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x)
                depth_mm.at<std::uint16_t>(y, x) =
                    static_cast<std::uint16_t>(3800 + 400 * y / std::max(1, S - 1));

        for (size_t j = 0; j < shapes.size(); ++j) {
            const ShapeSpec& sp = shapes[j];
            cv::Mat st = cv::Mat::zeros(S, S, CV_8UC1);
            draw_stencil(st, sp);
            cv::Vec3b color = shape_colors()[sp.kind];
            if (task == heads::Task::Depth) {
                const float bright = std::clamp(1.6f / sp.depth_m, 0.35f, 1.0f);
                for (int c = 0; c < 3; ++c)
                    color[c] = static_cast<uchar>(std::lround(color[c] * bright));
            }
            for (int y = 0; y < S; ++y) {
                for (int x = 0; x < S; ++x) {
                    if (!st.at<uchar>(y, x)) continue;
                    img.at<cv::Vec3b>(y, x) = color;
                    owner.at<std::int32_t>(y, x) = static_cast<std::int32_t>(j) + 1;
                    if (task == heads::Task::Depth)
                        depth_mm.at<std::uint16_t>(y, x) =
                            static_cast<std::uint16_t>(std::lround(sp.depth_m * 1000.0f));
                }
            }
        }

        cv::imwrite((fs::path(root) / "images" / (id + ".png")).string(), img);

        if (task != heads::Task::Depth) {
            cv::Mat mask = cv::Mat::zeros(S, S, CV_8UC1);
            const int off = (task == heads::Task::Detection) ? 1 : 0;  // keep 0 = background
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    const int o = owner.at<std::int32_t>(y, x);
                    if (o > 0) mask.at<uchar>(y, x) = static_cast<uchar>(shapes[o - 1].cls + off);
                }
            cv::imwrite((fs::path(root) / "masks" / (id + ".png")).string(), mask);
        }
        if (task == heads::Task::Depth)
            cv::imwrite((fs::path(root) / "depth" / (id + ".png")).string(), depth_mm);

        if (task == heads::Task::Detection) {
            std::vector<heads::DetBox> boxes;
            for (size_t j = 0; j < shapes.size(); ++j) {
                int minx = S, miny = S, maxx = -1, maxy = -1;
                for (int y = 0; y < S; ++y)
                    for (int x = 0; x < S; ++x)
                        if (owner.at<std::int32_t>(y, x) == static_cast<std::int32_t>(j) + 1) {
                            minx = std::min(minx, x);
                            maxx = std::max(maxx, x);
                            miny = std::min(miny, y);
                            maxy = std::max(maxy, y);
                        }
                if (maxx < 0) continue;  // fully occluded
                heads::DetBox b;
                b.x0 = static_cast<float>(minx);
                b.y0 = static_cast<float>(miny);
                b.x1 = static_cast<float>(maxx + 1);
                b.y1 = static_cast<float>(maxy + 1);
                b.cls = shapes[j].cls;
                boxes.push_back(b);
            }
            all_boxes[id] = boxes;
        }
    }

    if (task == heads::Task::Detection) {
        nlohmann::json jb = nlohmann::json::object();
        for (const auto& [id, boxes] : all_boxes) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& b : boxes)
                arr.push_back({{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}, {"cls", b.cls}});
            jb[id] = arr;
        }
        write_json((fs::path(root) / "boxes.json").string(), jb);
    }

    nlohmann::json meta;
    meta["task"] = task_name(task);
    meta["num_classes"] = static_cast<int>(class_names.size());
    meta["image_size"] = image_size;
    meta["seed"] = seed;
    meta["class_names"] = class_names;
    meta["ids"] = ids;
    write_json((fs::path(root) / "dataset.json").string(), meta);
}

namespace {

class SynthAdapter final : public DatasetAdapter {
public:
    explicit SynthAdapter(const std::string& root) : root_(root) {
        const fs::path meta_path = fs::path(root) / "dataset.json";
        std::ifstream in(meta_path, std::ios::binary);
        if (!in) throw ValidationError("no dataset at " + root + " (missing dataset.json)");
        nlohmann::json meta = nlohmann::json::parse(in, nullptr, false);
        if (meta.is_discarded()) throw ValidationError("corrupt dataset.json in " + root);
        task_ = task_from_name(meta.at("task").get<std::string>());
        num_classes_ = meta.at("num_classes").get<int>();
        class_names_ = meta.at("class_names").get<std::vector<std::string>>();
        ids_ = meta.at("ids").get<std::vector<std::string>>();

        const fs::path boxes_path = fs::path(root) / "boxes.json";
        if (fs::exists(boxes_path)) {
            std::ifstream bin(boxes_path, std::ios::binary);
            nlohmann::json jb = nlohmann::json::parse(bin);
            for (auto& [id, arr] : jb.items()) {
                std::vector<heads::DetBox> boxes;
                for (const auto& e : arr) {
                    heads::DetBox b;
                    b.x0 = e.at("x0").get<float>();
                    b.y0 = e.at("y0").get<float>();
                    b.x1 = e.at("x1").get<float>();
                    b.y1 = e.at("y1").get<float>();
                    b.cls = e.at("cls").get<int>();
                    boxes.push_back(b);
                }
                boxes_[id] = boxes;
            }
        }
    }

    heads::Task task() const override { return task_; }
    int size() const override { return static_cast<int>(ids_.size()); }
    const std::vector<std::string>& ids() const override { return ids_; }
    int num_classes() const override { return num_classes_; }
    const std::vector<std::string>& class_names() const override { return class_names_; }

    Sample load(const std::string& image_id) const override {
        if (std::find(ids_.begin(), ids_.end(), image_id) == ids_.end())
            throw ValidationError("image id '" + image_id + "' is not in this dataset");
        Sample s;
        s.image_id = image_id;
        s.image = img::load_image_chw((fs::path(root_) / "images" / (image_id + ".png")).string());

        const fs::path mask_path = fs::path(root_) / "masks" / (image_id + ".png");
        if (fs::exists(mask_path)) {
            cv::Mat m = cv::imread(mask_path.string(), cv::IMREAD_GRAYSCALE);
            if (m.empty()) throw Error("unreadable mask " + mask_path.string());
            s.seg_mask = nn::Tensor::zeros({m.rows, m.cols});
            for (int y = 0; y < m.rows; ++y)
                for (int x = 0; x < m.cols; ++x)
                    s.seg_mask.at(y, x) = static_cast<float>(m.at<uchar>(y, x));
        }
        const fs::path depth_path = fs::path(root_) / "depth" / (image_id + ".png");
        if (fs::exists(depth_path)) {
            cv::Mat d = cv::imread(depth_path.string(), cv::IMREAD_UNCHANGED);
            if (d.empty() || d.type() != CV_16UC1)
                throw Error("unreadable depth map " + depth_path.string());
            s.depth = nn::Tensor::zeros({d.rows, d.cols});
            for (int y = 0; y < d.rows; ++y)
                for (int x = 0; x < d.cols; ++x)
                    s.depth.at(y, x) = static_cast<float>(d.at<std::uint16_t>(y, x)) / 1000.0f;
        }
        auto it = boxes_.find(image_id);
        if (it != boxes_.end()) s.boxes = it->second;
        return s;
    }

private:
    std::string root_;
    heads::Task task_ = heads::Task::Segmentation;
    int num_classes_ = 0;
    std::vector<std::string> class_names_;
    std::vector<std::string> ids_;
    std::map<std::string, std::vector<heads::DetBox>> boxes_;
};

}  // namespace

std::unique_ptr<DatasetAdapter> open_dataset(const std::string& root) {
    return std::make_unique<SynthAdapter>(root);
}

}  // namespace tadp::data
