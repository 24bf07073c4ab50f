#include "dasnet/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "weights container assumes a little-endian host");

namespace dasnet {

namespace {

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::string& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("weights: truncated file " + path);
    return v;
}

}  // namespace

void save_weights(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("weights: cannot open for write: " + path);
    os.write("DSV2", 4);
    write_pod<std::uint32_t>(os, kWeightsFormatVersion);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t.name.size() > 0xFFFF) throw ConfigError("weights: tensor name too long: " + t.name);
        if (static_cast<std::int64_t>(t.values.size()) != t.shape.numel())
            throw ConfigError("weights: value count mismatch for " + t.name);
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.n));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.c));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.h));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.w));
        os.write(reinterpret_cast<const char*>(t.values.data()),
                 static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    }
    if (!os) throw IoError("weights: write failed: " + path);
}

std::vector<NamedTensor> load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("weights: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DSV2", 4) != 0)
        throw IoError("weights: bad magic in " + path);
    const auto version = read_pod<std::uint32_t>(is, path);
    if (version != kWeightsFormatVersion)
        throw IoError("weights: unsupported format version " + std::to_string(version));
    const auto count = read_pod<std::uint32_t>(is, path);
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto name_len = read_pod<std::uint16_t>(is, path);
        t.name.resize(name_len);
        is.read(t.name.data(), name_len);
        t.shape.n = static_cast<int>(read_pod<std::uint32_t>(is, path));
        t.shape.c = static_cast<int>(read_pod<std::uint32_t>(is, path));
        t.shape.h = static_cast<int>(read_pod<std::uint32_t>(is, path));
        t.shape.w = static_cast<int>(read_pod<std::uint32_t>(is, path));
        const std::int64_t n = t.shape.numel();
        if (n < 0 || n > (1LL << 31))
            throw IoError("weights: implausible tensor size in " + path);
        t.values.resize(static_cast<std::size_t>(n));
        is.read(reinterpret_cast<char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(float)));
        if (!is) throw IoError("weights: truncated tensor data in " + path);
        tensors.push_back(std::move(t));
    }
    return tensors;
}

}  // namespace dasnet
