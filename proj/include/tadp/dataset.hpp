#pragma once

#include <memory>
#include <string>
#include <vector>

#include "tadp/heads.hpp"
#include "tadp/tensor.hpp"

namespace tadp::data {

std::string task_name(heads::Task t);
heads::Task task_from_name(const std::string& s);

struct Sample {
    std::string image_id;
    nn::Tensor image;                  // 3 x H x W in [0, 1]
    nn::Tensor seg_mask;               // H x W class indices (segmentation, detection)
    nn::Tensor depth;                  // H x W meters (depth)
    std::vector<heads::DetBox> boxes;  // detection ground truth
};

class DatasetAdapter {
public:
    virtual ~DatasetAdapter() = default;
    virtual heads::Task task() const = 0;
    virtual int size() const = 0;
    virtual const std::vector<std::string>& ids() const = 0;
    virtual Sample load(const std::string& image_id) const = 0;
    virtual int num_classes() const = 0;
    virtual const std::vector<std::string>& class_names() const = 0;
    virtual int ignore_index() const { return 255; }
};

// Colored shape scenes on disk: images/, masks/ (class-index PNG), depth/
// (16-bit millimeter PNG), boxes.json, dataset.json. Rerunning with the same
// arguments reproduces every file byte for byte. Segmentation class 0 is the
// background; detection classes are the shapes themselves.
void synth_dataset(const std::string& root, heads::Task task, int n_images, int n_classes,
                   std::uint64_t seed, int image_size = 64);

std::unique_ptr<DatasetAdapter> open_dataset(const std::string& root);

}  // namespace tadp::data
