#include "voldet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace voldet {

namespace {

void put_u32(std::ofstream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

void write_ckpt1(const std::string& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_ckpt1: cannot open " + path);
    os.write("CKPT1", 5);
    put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::int64_t d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("write_ckpt1: write failed for " + path);
}

NamedTensors read_ckpt1(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_ckpt1: cannot open " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, "CKPT1", 5) != 0)
        throw std::runtime_error("read_ckpt1: bad magic in " + path);
    const std::uint32_t count = get_u32(is);
    NamedTensors tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const std::uint32_t rank = get_u32(is);
        std::vector<std::int64_t> shape(rank);
        for (auto& d : shape) d = get_u32(is);
        if (!is) throw std::runtime_error("read_ckpt1: truncated header in " + path);
        Tensor<float> t(shape);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!is) throw std::runtime_error("read_ckpt1: truncated tensor '" + name + "' in " + path);
        tensors.emplace_back(std::move(name), std::move(t));
    }
    return tensors;
}

} // namespace voldet
