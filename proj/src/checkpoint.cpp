#include "hrtse/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "hrtse/common.hpp"

namespace hrtse {

namespace {

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint: truncated file");
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put<uint32_t>(os, uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

std::string get_string(std::istream& is) {
    uint32_t n = get<uint32_t>(is);
    if (n > (1u << 24)) throw IoError("checkpoint: implausible string length");
    std::string s(n, '\0');
    is.read(s.data(), std::streamsize(n));
    if (!is) throw IoError("checkpoint: truncated file");
    return s;
}

nlohmann::json read_header(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError("checkpoint: bad magic (not a checkpoint file)");
    uint32_t version = get<uint32_t>(is);
    if (version != kCheckpointVersion)
        throw ConfigError("checkpoint: unsupported version " +
                          std::to_string(version));
    std::string hs = get_string(is);
    nlohmann::json h = nlohmann::json::parse(hs, nullptr, false);
    if (h.is_discarded()) throw IoError("checkpoint: corrupt header");
    return h;
}

}  // namespace

void save_checkpoint(const std::string& path, const nn::Params& params,
                     const nlohmann::json& header) {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";

    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("checkpoint: cannot write " + tmp.string());
        os.write(kCheckpointMagic, 8);
        put<uint32_t>(os, kCheckpointVersion);
        put_string(os, header.dump());
        put<uint64_t>(os, uint64_t(params.items().size()));
        for (const auto& [name, v] : params.items()) {
            put_string(os, name);
            put<uint32_t>(os, uint32_t(v->value.shape.size()));
            for (int d : v->value.shape) put<int32_t>(os, int32_t(d));
            os.write(reinterpret_cast<const char*>(v->value.data.data()),
                     std::streamsize(v->value.data.size() * sizeof(float)));
        }
        if (!os) throw IoError("checkpoint: write failed for " + tmp.string());
    }
    fs::rename(tmp, target);
}

nlohmann::json load_checkpoint(const std::string& path, nn::Params& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);
    nlohmann::json header = read_header(is);

    uint64_t count = get<uint64_t>(is);
    if (count != params.items().size())
        throw ConfigError("checkpoint: holds " + std::to_string(count) +
                          " arrays but the model has " +
                          std::to_string(params.items().size()));
    for (uint64_t i = 0; i < count; ++i) {
        std::string name = get_string(is);
        if (!params.contains(name))
            throw ConfigError("checkpoint: unknown array " + name);
        ad::Var v = params.find(name);
        uint32_t nd = get<uint32_t>(is);
        if (nd > 8) throw IoError("checkpoint: implausible rank");
        std::vector<int> shape(nd);
        for (auto& d : shape) d = get<int32_t>(is);
        if (shape != v->value.shape) {
            std::string got;
            for (int d : shape) got += (got.empty() ? "" : "x") + std::to_string(d);
            throw ConfigError("checkpoint: array " + name + " has shape [" + got +
                              "] but the model expects " + v->value.shape_str());
        }
        is.read(reinterpret_cast<char*>(v->value.data.data()),
                std::streamsize(v->value.data.size() * sizeof(float)));
        if (!is) throw IoError("checkpoint: truncated array data");
    }
    return header;
}

nlohmann::json peek_checkpoint_header(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);
    return read_header(is);
}

}  // namespace hrtse
