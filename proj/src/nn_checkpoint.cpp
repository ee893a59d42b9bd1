#include "mct/nn/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "mct/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace mct::nn {

const std::vector<double>& Checkpoint::array(const std::string& name) const {
    for (const auto& [n, a] : arrays) {
        if (n == name) return a;
    }
    throw IoError("checkpoint: missing array " + name);
}

bool Checkpoint::has_array(const std::string& name) const {
    for (const auto& [n, a] : arrays) {
        if (n == name) return true;
    }
    return false;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out << "mct-checkpoint v1\n";
    const auto& c = ckpt.config;
    out << "vocab_size " << c.vocab_size << "\n"
        << "context_len " << c.context_len << "\n"
        << "d_model " << c.d_model << "\n"
        << "n_layers " << c.n_layers << "\n"
        << "n_heads " << c.n_heads << "\n"
        << "d_ff " << c.d_ff << "\n"
        << "init_seed " << c.init_seed << "\n"
        << "step " << ckpt.step << "\n"
        << "dtype " << ckpt.dtype << "\n";
    for (const auto& [name, a] : ckpt.arrays) {
        out << "array " << name << " " << a.size() << "\n";
    }
    out << "DATA\n";
    for (const auto& [name, a] : ckpt.arrays) {
        out.write(reinterpret_cast<const char*>(a.data()),
                  static_cast<std::streamsize>(a.size() * sizeof(double)));
    }
    if (!out) throw IoError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "mct-checkpoint v1") {
        throw IoError("not an mct checkpoint: " + path);
    }
    Checkpoint ckpt;
    std::vector<std::pair<std::string, std::size_t>> dir;
    while (std::getline(in, line)) {
        if (line == "DATA") break;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "vocab_size") ls >> ckpt.config.vocab_size;
        else if (key == "context_len") ls >> ckpt.config.context_len;
        else if (key == "d_model") ls >> ckpt.config.d_model;
        else if (key == "n_layers") ls >> ckpt.config.n_layers;
        else if (key == "n_heads") ls >> ckpt.config.n_heads;
        else if (key == "d_ff") ls >> ckpt.config.d_ff;
        else if (key == "init_seed") ls >> ckpt.config.init_seed;
        else if (key == "step") ls >> ckpt.step;
        else if (key == "dtype") ls >> ckpt.dtype;
        else if (key == "array") {
            std::string name;
            std::size_t n;
            ls >> name >> n;
            dir.emplace_back(name, n);
        } else {
            throw IoError("checkpoint: unknown header key " + key);
        }
        if (ls.fail()) throw IoError("checkpoint: malformed header line: " + line);
    }
    for (const auto& [name, n] : dir) {
        std::vector<double> a(n);
        in.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw IoError("checkpoint: truncated array " + name);
        ckpt.arrays.emplace_back(name, std::move(a));
    }
    return ckpt;
}

}  // namespace mct::nn
