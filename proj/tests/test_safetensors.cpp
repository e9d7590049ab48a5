#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "tadp/error.hpp"
#include "tadp/rng.hpp"
#include "tadp/safetensors.hpp"

using namespace tadp;
using namespace tadp::nn;

namespace {
std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}
}  // namespace

TEST_CASE("checkpoint round trip") {
    Rng rng(5);
    std::map<std::string, Tensor> ts;
    Tensor a({3, 4});
    for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = rng.normal_f();
    Tensor b({2, 2, 2});
    for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = rng.normal_f();
    ts["weight"] = a;
    ts["bias"] = b;

    std::string path = tmp_path("tadp_ckpt_test.safetensors");
    io::save_tensors(path, ts, {{"purpose", "unit-test"}});
    auto loaded = io::load_tensors(path);
    REQUIRE(loaded.tensors.size() == 2);
    CHECK(loaded.metadata.at("purpose") == "unit-test");
    CHECK(loaded.tensors.at("weight").shape() == std::vector<int>{3, 4});
    CHECK(loaded.tensors.at("bias").shape() == std::vector<int>{2, 2, 2});
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(loaded.tensors.at("weight")[i] == a[i]);
    for (std::int64_t i = 0; i < b.numel(); ++i) CHECK(loaded.tensors.at("bias")[i] == b[i]);
    std::filesystem::remove(path);
}

TEST_CASE("identical state serializes to identical bytes") {
    std::map<std::string, Tensor> ts;
    ts["z_second"] = Tensor::full({2}, 1.0f);
    ts["a_first"] = Tensor::full({3}, 2.0f);
    std::string p1 = tmp_path("tadp_ckpt_a.safetensors");
    std::string p2 = tmp_path("tadp_ckpt_b.safetensors");
    io::save_tensors(p1, ts);
    io::save_tensors(p2, ts);
    CHECK(file_bytes(p1) == file_bytes(p2));
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("header layout starts with little-endian length") {
    std::map<std::string, Tensor> ts;
    ts["t"] = Tensor::full({1}, 3.0f);
    std::string path = tmp_path("tadp_ckpt_layout.safetensors");
    io::save_tensors(path, ts);
    std::string bytes = file_bytes(path);
    REQUIRE(bytes.size() > 12);
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i)
        hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[static_cast<size_t>(i)])) << (8 * i);
    CHECK(hlen + 8 + 4 == bytes.size());  // header + one float
    CHECK(bytes[8] == '{');
    std::filesystem::remove(path);
}

TEST_CASE("load rejects damaged files") {
    std::string path = tmp_path("tadp_ckpt_bad.safetensors");
    {
        std::ofstream f(path, std::ios::binary);
        f << "short";
    }
    CHECK_THROWS_AS(io::load_tensors(path), Error);
    CHECK_THROWS_AS(io::load_tensors(tmp_path("tadp_missing_file")), Error);
    std::filesystem::remove(path);
}
