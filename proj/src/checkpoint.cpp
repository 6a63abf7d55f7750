#include "r3mem/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>

#include "r3mem/errors.hpp"

namespace r3mem {

namespace {

void w32(std::ostream & os, uint32_t v) {
    unsigned char b[4] = {(unsigned char) (v & 0xff), (unsigned char) ((v >> 8) & 0xff),
                          (unsigned char) ((v >> 16) & 0xff), (unsigned char) ((v >> 24) & 0xff)};
    os.write((const char *) b, 4);
}

uint32_t r32(std::istream & is) {
    unsigned char b[4];
    is.read((char *) b, 4);
    if (!is) throw format_error("checkpoint truncated");
    return (uint32_t) b[0] | ((uint32_t) b[1] << 8) | ((uint32_t) b[2] << 16) | ((uint32_t) b[3] << 24);
}

void write_f32(std::ostream & os, const std::vector<float> & v) {
    // this artifact targets little-endian hosts; bytes go out as stored
    static_assert(sizeof(float) == 4);
    os.write((const char *) v.data(), (std::streamsize) (v.size() * 4));
}

} // namespace

void save_checkpoint(const std::string & path, RevformerParams<float> & params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw usage_error("cannot open checkpoint for writing: " + path);
    os.write("R3M1", 4);
    w32(os, CHECKPOINT_VERSION);
    const std::string cfg = params.cfg.to_text(params.has_adapters);
    w32(os, (uint32_t) cfg.size());
    os.write(cfg.data(), (std::streamsize) cfg.size());
    auto arrays = params.named_arrays();
    std::sort(arrays.begin(), arrays.end(), [](const auto & a, const auto & b) { return a.first < b.first; });
    for (auto & [name, t] : arrays) {
        w32(os, (uint32_t) name.size());
        os.write(name.data(), (std::streamsize) name.size());
        w32(os, (uint32_t) t->rank());
        for (int i = 0; i < t->rank(); ++i) w32(os, (uint32_t) t->dim(i));
        write_f32(os, t->data());
    }
    if (!os) throw usage_error("failed writing checkpoint: " + path);
}

RevformerParams<float> load_checkpoint_f32(const std::string & path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw usage_error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "R3M1", 4) != 0) throw format_error("bad checkpoint magic");
    const uint32_t version = r32(is);
    if (version != CHECKPOINT_VERSION) {
        throw format_error("unsupported checkpoint version " + std::to_string(version));
    }
    const uint32_t cfg_len = r32(is);
    std::string    cfg_text(cfg_len, '\0');
    is.read(cfg_text.data(), cfg_len);
    if (!is) throw format_error("checkpoint truncated in config block");
    auto [cfg, has_adapters] = ModelConfig::from_text(cfg_text);
    cfg.validate();

    struct RawArray {
        std::vector<int>   dims;
        std::vector<float> data;
    };
    std::map<std::string, RawArray> raw;
    while (true) {
        is.peek();
        if (is.eof()) break;
        const uint32_t name_len = r32(is);
        if (name_len == 0 || name_len > 4096) throw format_error("implausible array name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const uint32_t rank = r32(is);
        if (rank > 8) throw format_error("implausible array rank");
        RawArray a;
        size_t   n = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            const uint32_t d = r32(is);
            a.dims.push_back((int) d);
            n *= d;
        }
        a.data.resize(n);
        is.read((char *) a.data.data(), (std::streamsize) (n * 4));
        if (!is) throw format_error("checkpoint truncated in array '" + name + "'");
        if (!raw.emplace(std::move(name), std::move(a)).second) throw format_error("duplicate array name");
    }

    // zero-shaped skeleton fixes the expected names and dims
    RevformerParams<float> P;
    P.cfg = cfg;
    const int d = cfg.d_model, V = cfg.vocab_size, ff = cfg.ffn_dim, r = cfg.adapter_rank, m = cfg.mem_tokens;
    P.embed = Tensor<float>::zeros({V, d});
    P.blocks.resize((size_t) cfg.n_layers);
    for (auto & b : P.blocks) {
        b.wq    = Tensor<float>::zeros({d, d});
        b.wk    = Tensor<float>::zeros({d, d});
        b.wv    = Tensor<float>::zeros({d, d});
        b.wo    = Tensor<float>::zeros({d, d});
        b.w1    = Tensor<float>::zeros({d, ff});
        b.w2    = Tensor<float>::zeros({ff, d});
        b.norm1 = Tensor<float>::zeros({d});
        b.norm2 = Tensor<float>::zeros({d});
    }
    P.final_norm = Tensor<float>::zeros({d});
    if (has_adapters) {
        P.has_adapters = true;
        P.theta        = Tensor<float>::zeros({m, d});
        P.adapters.resize((size_t) cfg.n_layers);
        for (auto & a : P.adapters) {
            a.f.down = Tensor<float>::zeros({d, r});
            a.f.up   = Tensor<float>::zeros({r, d});
            a.g.down = Tensor<float>::zeros({d, r});
            a.g.up   = Tensor<float>::zeros({r, d});
        }
    }
    for (auto & [name, t] : P.named_arrays()) {
        auto it = raw.find(name);
        if (it == raw.end()) throw format_error("checkpoint missing array '" + name + "'");
        if (it->second.dims != t->shape()) throw format_error("checkpoint array '" + name + "' has wrong shape");
        *t = Tensor<float>::from(it->second.dims, std::move(it->second.data));
        raw.erase(it);
    }
    if (!raw.empty()) throw format_error("checkpoint has unexpected array '" + raw.begin()->first + "'");
    return P;
}

} // namespace r3mem
