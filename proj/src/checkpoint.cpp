#include "mathena/checkpoint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "mathena/serialize.hpp"

namespace fs = std::filesystem;

namespace mathena {

std::string sha256_hex(const void* data, size_t len) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int dlen = 0;
    if (!EVP_Digest(data, len, digest, &dlen, EVP_sha256(), nullptr))
        throw NumericsError("sha256_hex: digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out(dlen * 2, '0');
    for (unsigned int i = 0; i < dlen; ++i) {
        out[2 * i] = hex[digest[i] >> 4];
        out[2 * i + 1] = hex[digest[i] & 0xf];
    }
    return out;
}

namespace {

// Parameter names contain '/'; flatten them for the per-tensor filenames.
std::string file_name(const std::string& param_name) {
    std::string s = param_name;
    for (char& c : s)
        if (c == '/') c = '_';
    return s + ".mten";
}

}  // namespace

void save_checkpoint(const std::string& dir, const ParamStore& store) {
    fs::create_directories(dir);
    std::ofstream manifest((fs::path(dir) / "manifest.txt").string());
    if (!manifest) throw InputError("save_checkpoint: cannot write to " + dir);
    for (const ParamEntry& e : store.entries()) {
        manifest << e.name << '\t';
        for (size_t i = 0; i < e.tensor.shape().size(); ++i)
            manifest << (i ? "x" : "") << e.tensor.shape()[i];
        manifest << '\t' << (e.frozen ? 1 : 0) << '\n';
        save_tensor((fs::path(dir) / file_name(e.name)).string(), e.tensor);
    }
}

void load_checkpoint(const std::string& dir, ParamStore& store) {
    std::ifstream manifest((fs::path(dir) / "manifest.txt").string());
    if (!manifest) throw InputError("load_checkpoint: missing manifest in " + dir);
    std::map<std::string, bool> frozen;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, dims;
        int fz = 0;
        if (!(ls >> name >> dims >> fz))
            throw InputError("load_checkpoint: malformed manifest line: " + line);
        frozen[name] = fz != 0;
    }
    for (ParamEntry& e : store.entries()) {
        auto it = frozen.find(e.name);
        if (it == frozen.end())
            throw InputError("load_checkpoint: checkpoint lacks parameter " + e.name);
        Tensor t = load_tensor((fs::path(dir) / file_name(e.name)).string());
        if (t.shape() != e.tensor.shape())
            throw ShapeError("load_checkpoint: shape mismatch for " + e.name + ": expected " +
                             shape_str(e.tensor.shape()) + ", got " + shape_str(t.shape()));
        std::copy(t.data().begin(), t.data().end(), e.tensor.mutable_data().begin());
        e.frozen = it->second;
        e.tensor.set_requires_grad(!e.frozen);
    }
}

}  // namespace mathena
