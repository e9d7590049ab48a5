#include "tadp/safetensors.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "tadp/error.hpp"

namespace tadp::io {

using nlohmann::json;

void save_tensors(const std::string& path, const std::map<std::string, nn::Tensor>& tensors,
                  const std::map<std::string, std::string>& metadata) {
    json header = json::object();
    if (!metadata.empty()) {
        json meta = json::object();
        for (const auto& [k, v] : metadata) meta[k] = v;
        header["__metadata__"] = meta;
    }
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {  // std::map iterates sorted
        std::uint64_t bytes = static_cast<std::uint64_t>(t.numel()) * 4;
        json entry;
        entry["dtype"] = "F32";
        entry["shape"] = t.shape();
        entry["data_offsets"] = {offset, offset + bytes};
        header[name] = entry;
        offset += bytes;
    }
    std::string hs = header.dump();
    std::uint64_t hlen = hs.size();

    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot open " + tmp + " for writing");
        char lenbuf[8];
        for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
        f.write(lenbuf, 8);
        f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        for (const auto& [name, t] : tensors)
            f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel()) * 4);
        if (!f) throw Error("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error("rename " + tmp + " -> " + path + " failed: " + ec.message());
}

LoadedTensors load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint " + path);
    char lenbuf[8];
    f.read(lenbuf, 8);
    if (f.gcount() != 8) throw Error("checkpoint too short: " + path);
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
    if (hlen > (1u << 26)) throw Error("checkpoint header implausibly large: " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (static_cast<std::uint64_t>(f.gcount()) != hlen) throw Error("truncated checkpoint header: " + path);

    json header;
    try {
        header = json::parse(hs);
    } catch (const json::exception& e) {
        throw Error("bad checkpoint header in " + path + ": " + e.what());
    }

    LoadedTensors out;
    std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    for (auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            for (auto& [k, v] : entry.items()) out.metadata[k] = v.get<std::string>();
            continue;
        }
        std::string dtype = entry.at("dtype").get<std::string>();
        if (dtype != "F32") throw Error("unsupported dtype " + dtype + " for tensor " + name);
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        std::uint64_t b0 = entry.at("data_offsets")[0].get<std::uint64_t>();
        std::uint64_t b1 = entry.at("data_offsets")[1].get<std::uint64_t>();
        if (b1 < b0 || b1 > raw.size()) throw Error("tensor " + name + " offsets out of range in " + path);
        nn::Tensor t(shape);
        if (static_cast<std::uint64_t>(t.numel()) * 4 != b1 - b0)
            throw Error("tensor " + name + " size mismatch in " + path);
        std::memcpy(t.data(), raw.data() + b0, b1 - b0);
        out.tensors.emplace(name, std::move(t));
    }
    return out;
}

}  // namespace tadp::io
