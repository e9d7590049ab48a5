#pragma once

#include <string>
#include <vector>

#include "tadp/tensor.hpp"

namespace tadp::viz {

using nn::Tensor;

struct ChartSpec {
    std::string title;
    std::string x_label;
    std::string y_label;
    int width = 640;
    int height = 400;
};

struct Series {
    std::string label;
    std::vector<double> xs;
    std::vector<double> ys;
};

// All renderers draw with integer rasterization and fixed PNG settings, so a
// rerun with the same inputs produces the same bytes.
void line_chart(const std::string& out_png, const ChartSpec& spec,
                const std::vector<Series>& series);
void bar_chart(const std::string& out_png, const ChartSpec& spec,
               const std::vector<std::string>& labels, const std::vector<double>& values);
void scatter_plot(const std::string& out_png, const ChartSpec& spec,
                  const std::vector<double>& xs, const std::vector<double>& ys);
// matrix is rows x cols, values expected in [0, 1]; labels may be empty or
// must match the matrix dimensions.
void heatmap(const std::string& out_png, const ChartSpec& spec, const Tensor& matrix,
             const std::vector<std::string>& row_labels,
             const std::vector<std::string>& col_labels);

// Writes one 2d attention map as attn_{image_id}_{token_index}_{token_text}.png
// inside dir (created if absent) and returns the full path.
std::string save_attention_map(const std::string& dir, const std::string& image_id,
                               int token_index, const std::string& token_text,
                               const Tensor& map);

struct EmitResult {
    std::string csv_path;
    std::vector<std::string> png_paths;
    int records = 0;
};

// Reads run_dir/metrics.jsonl and writes run_dir/metrics.csv plus chart PNGs
// under run_dir/plots/.
EmitResult emit_plots(const std::string& run_dir);

}  // namespace tadp::viz
