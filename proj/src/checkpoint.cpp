#include "oscqat/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace oscqat {

namespace {

// Files are written little-endian; this implementation assumes a
// little-endian host, which covers every supported platform.
template <typename T>
void write_pod(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f, const std::string& path) {
    T v{};
    if (!f.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw std::runtime_error(path + ": truncated checkpoint");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor*>>& tensors) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error(path + ": cannot open for writing");
    f.write("OQAT", 4);
    write_pod<std::uint32_t>(f, kCheckpointVersion);
    for (const auto& [name, t] : tensors) {
        write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape) write_pod<std::uint64_t>(f, d);
        f.write(reinterpret_cast<const char*>(t->data.data()),
                static_cast<std::streamsize>(t->data.size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error(path + ": write failed");
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error(path + ": cannot open");
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, "OQAT", 4) != 0)
        throw std::runtime_error(path + ": not an OQAT checkpoint");
    const auto version = read_pod<std::uint32_t>(f, path);
    if (version != kCheckpointVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    std::map<std::string, Tensor> out;
    while (f.peek() != EOF) {
        const auto nlen = read_pod<std::uint32_t>(f, path);
        std::string name(nlen, '\0');
        if (!f.read(name.data(), nlen)) throw std::runtime_error(path + ": truncated name");
        const auto rank = read_pod<std::uint32_t>(f, path);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(f, path));
        Tensor t = Tensor::zeros(shape);
        if (!f.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(double))))
            throw std::runtime_error(path + ": truncated data for tensor " + name);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

void restore_into(const std::map<std::string, Tensor>& loaded,
                  const std::vector<std::pair<std::string, Tensor*>>& dests) {
    for (const auto& [name, dst] : dests) {
        auto it = loaded.find(name);
        if (it == loaded.end())
            throw std::runtime_error("checkpoint missing tensor " + name);
        if (it->second.shape != dst->shape)
            throw std::runtime_error("checkpoint tensor " + name + " has shape " +
                                     shape_str(it->second.shape) + ", expected " +
                                     shape_str(dst->shape));
        *dst = it->second;
    }
}

}  // namespace oscqat
