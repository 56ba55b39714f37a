#include "mathena/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace mathena {

static_assert(std::endian::native == std::endian::little,
              "MTEN io assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'M', 'T', 'E', 'N'};
constexpr uint8_t kVersion = 1;
}  // namespace

void write_mten(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    os.put(static_cast<char>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) {
        const uint32_t d = static_cast<uint32_t>(t.dim(i));
        os.write(reinterpret_cast<const char*>(&d), 4);
    }
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(float)));
}

Tensor read_mten(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw InputError("read_mten: bad magic");
    const int version = is.get();
    if (version != kVersion) throw InputError("read_mten: unsupported version");
    const int rank = is.get();
    if (rank < 0 || rank > 8) throw InputError("read_mten: bad rank");
    Shape shape(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) {
        uint32_t d = 0;
        is.read(reinterpret_cast<char*>(&d), 4);
        shape[static_cast<size_t>(i)] = static_cast<int>(d);
    }
    std::vector<float> data(static_cast<size_t>(numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!is) throw InputError("read_mten: truncated payload");
    return Tensor::from_data(shape, std::move(data), false);
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("save_tensor: cannot open " + path);
    write_mten(os, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("load_tensor: cannot open " + path);
    return read_mten(is);
}

}  // namespace mathena
