#include "tadp/image_io.hpp"

#include <algorithm>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "tadp/error.hpp"

namespace tadp::img {

using nn::Tensor;

Tensor load_image_chw(const std::string& path) {
    cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    if (bgr.empty()) throw ValidationError("cannot read image " + path);
    Tensor out({3, bgr.rows, bgr.cols});
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x) {
            out.at(0, y, x) = static_cast<float>(row[x][2]) / 255.0f;
            out.at(1, y, x) = static_cast<float>(row[x][1]) / 255.0f;
            out.at(2, y, x) = static_cast<float>(row[x][0]) / 255.0f;
        }
    }
    return out;
}

void save_image_chw(const std::string& path, const Tensor& chw) {
    if (chw.ndim() != 3 || (chw.dim(0) != 3 && chw.dim(0) != 1)) {
        throw ValidationError("expected a 1- or 3-channel image tensor");
    }
    const int h = chw.dim(1), w = chw.dim(2);
    auto byte_of = [&](int c, int y, int x) {
        float v = chw.at(chw.dim(0) == 1 ? 0 : c, y, x);
        return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    };
    cv::Mat bgr(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < w; ++x) row[x] = {byte_of(2, y, x), byte_of(1, y, x), byte_of(0, y, x)};
    }
    if (!cv::imwrite(path, bgr)) throw Error("cannot write image " + path);
}

}  // namespace tadp::img
