#include "dtn/domain_transform.hpp"

#include <stdexcept>

#include "dtn/stats.hpp"

namespace dtn::transform {

using namespace ag;
using model::Forward;
using model::ModelParams;

DtnKind kind_from_string(const std::string& s) {
    if (s == "attention") return DtnKind::attention;
    if (s == "ffn") return DtnKind::ffn;
    throw std::invalid_argument("dtn: unknown kind '" + s + "'");
}

std::string to_string(DtnKind k) {
    return k == DtnKind::attention ? "attention" : "ffn";
}

namespace {

std::mt19937_64 path_rng(std::uint64_t seed, const std::string& path) {
    return std::mt19937_64(seed ^ stats::fnv1a(path.data(), path.size()));
}

}  // namespace

void init_dtn(model::ModelParams& params, const model::ModelConfig& cfg, int n_domains,
              DtnKind kind, std::uint64_t seed) {
    if (n_domains < 1)
        throw std::invalid_argument("init_dtn: n_domains must be >= 1, got " +
                                    std::to_string(n_domains));
    const int d = cfg.d_model, f = cfg.d_ffn;
    for (int n = 0; n < n_domains; ++n) {
        const std::string pre = "dtn." + std::to_string(n);
        params[pre + ".norm1.gain"] = Tensor::full({d}, 1.0, true);
        params[pre + ".norm1.bias"] = Tensor::zeros({d}, true);
        if (kind == DtnKind::attention) {
            for (const char* w : {"wq", "wk", "wv"}) {
                auto rng = path_rng(seed, pre + ".attn." + w);
                params[pre + ".attn." + w] = model::xavier_init({d, d}, rng);
            }
            // zero output projection: the block starts as the identity
            params[pre + ".attn.wo"] = Tensor::zeros({d, d}, true);
            params[pre + ".norm2.gain"] = Tensor::full({d}, 1.0, true);
            params[pre + ".norm2.bias"] = Tensor::zeros({d}, true);
            auto r1 = path_rng(seed, pre + ".ffn.w1");
            params[pre + ".ffn.w1"] = model::xavier_init({d, f}, r1);
            params[pre + ".ffn.b1"] = Tensor::zeros({f}, true);
            params[pre + ".ffn.w2"] = Tensor::zeros({f, d}, true);
            params[pre + ".ffn.b2"] = Tensor::zeros({d}, true);
        } else {
            auto r1 = path_rng(seed, pre + ".ffn.w1");
            params[pre + ".ffn.w1"] = model::xavier_init({d, f}, r1);
            params[pre + ".ffn.b1"] = Tensor::zeros({f}, true);
            params[pre + ".ffn.w2"] = Tensor::zeros({f, d}, true);
            params[pre + ".ffn.b2"] = Tensor::zeros({d}, true);
        }
    }
}

int dtn_domains(const model::ModelParams& params) {
    int n = 0;
    while (params.count("dtn." + std::to_string(n) + ".norm1.gain")) ++n;
    return n;
}

bool has_dtn(const model::ModelParams& params) { return dtn_domains(params) > 0; }

Tensor transform(const Forward& f, const Tensor& h, const data::Batch& b, int domain) {
    const int n = dtn_domains(*f.params);
    if (domain < 0 || domain >= n)
        throw std::invalid_argument("transform: unknown domain " +
                                    std::to_string(domain) + " for bank of " +
                                    std::to_string(n));
    const std::string pre = "dtn." + std::to_string(domain);
    auto get = [&](const std::string& s) -> const Tensor& {
        return f.params->at(pre + s);
    };

    // pre-norm residual blocks; zero final projections make this the identity
    Tensor x = h;
    if (f.params->count(pre + ".attn.wq")) {
        Tensor ln = layer_norm(x, get(".norm1.gain"), get(".norm1.bias"));
        Tensor mask = model::expand_src_mask(*f.cfg, b.src_mask, b.rows, b.src_len,
                                             b.src_len);
        x = add(x, model::mha(f, pre + ".attn", ln, ln, mask));
        Tensor ln2 = layer_norm(x, get(".norm2.gain"), get(".norm2.bias"));
        Tensor mid = relu(add(linear(ln2, get(".ffn.w1")), get(".ffn.b1")));
        x = add(x, add(linear(mid, get(".ffn.w2")), get(".ffn.b2")));
    } else {
        Tensor ln = layer_norm(x, get(".norm1.gain"), get(".norm1.bias"));
        Tensor mid = relu(add(linear(ln, get(".ffn.w1")), get(".ffn.b1")));
        x = add(x, add(linear(mid, get(".ffn.w2")), get(".ffn.b2")));
    }
    return x;
}

}  // namespace dtn::transform
