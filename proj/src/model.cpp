#include "dtn/model.hpp"

#include <cmath>
#include <stdexcept>

#include "dtn/stats.hpp"

namespace dtn::model {

using namespace ag;

void ModelConfig::validate() const {
    if (vocab_size_src <= 0 || vocab_size_tgt <= 0)
        throw std::invalid_argument("config: vocabulary sizes must be positive");
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
        throw std::invalid_argument("config: d_model " + std::to_string(d_model) +
                                    " not divisible by n_heads " +
                                    std::to_string(n_heads));
    if (n_enc_layers <= 0 || n_dec_layers <= 0 || d_ffn <= 0 || max_len <= 0)
        throw std::invalid_argument("config: layer sizes must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw std::invalid_argument("config: dropout_rate outside [0,1)");
    if (pad_id == bos_id || pad_id == eos_id || bos_id == eos_id)
        throw std::invalid_argument("config: pad/bos/eos ids must be distinct");
    const int vmin = std::min(vocab_size_src, vocab_size_tgt);
    if (pad_id >= vmin || bos_id >= vmin || eos_id >= vmin)
        throw std::invalid_argument("config: special ids exceed vocabulary");
}

Tensor xavier_init(const Shape& shape, std::mt19937_64& rng) {
    std::size_t fan_in = shape.size() >= 2 ? shape[0] : shape.back();
    std::size_t fan_out = shape.back();
    const double lim = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-lim, lim);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor::from(shape, v, true);
}

namespace {

std::mt19937_64 path_rng(std::uint64_t seed, const std::string& path) {
    return std::mt19937_64(seed ^ stats::fnv1a(path.data(), path.size()));
}

void add_norm(ModelParams& p, std::uint64_t, const std::string& prefix, int d) {
    p[prefix + ".gain"] = Tensor::full({d}, 1.0, true);
    p[prefix + ".bias"] = Tensor::zeros({d}, true);
}

void add_attn(ModelParams& p, std::uint64_t seed, const std::string& prefix, int d) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
        const std::string path = prefix + "." + w;
        auto rng = path_rng(seed, path);
        p[path] = xavier_init({d, d}, rng);
    }
}

void add_ffn(ModelParams& p, std::uint64_t seed, const std::string& prefix, int d,
             int f) {
    auto r1 = path_rng(seed, prefix + ".w1");
    p[prefix + ".w1"] = xavier_init({d, f}, r1);
    p[prefix + ".b1"] = Tensor::zeros({f}, true);
    auto r2 = path_rng(seed, prefix + ".w2");
    p[prefix + ".w2"] = xavier_init({f, d}, r2);
    p[prefix + ".b2"] = Tensor::zeros({d}, true);
}

}  // namespace

ModelParams init_nmt_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    {
        auto rng = path_rng(seed, "src_embed");
        p["src_embed"] = xavier_init({cfg.vocab_size_src, cfg.d_model}, rng);
    }
    {
        auto rng = path_rng(seed, "tgt_embed");
        p["tgt_embed"] = xavier_init({cfg.vocab_size_tgt, cfg.d_model}, rng);
    }
    {
        auto rng = path_rng(seed, "out_proj");
        p["out_proj"] = xavier_init({cfg.d_model, cfg.vocab_size_tgt}, rng);
    }
    for (int l = 0; l < cfg.n_enc_layers; ++l) {
        const std::string pre = "enc.l" + std::to_string(l);
        add_attn(p, seed, pre + ".attn", cfg.d_model);
        add_norm(p, seed, pre + ".norm1", cfg.d_model);
        add_ffn(p, seed, pre + ".ffn", cfg.d_model, cfg.d_ffn);
        add_norm(p, seed, pre + ".norm2", cfg.d_model);
    }
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
        const std::string pre = "dec.l" + std::to_string(l);
        add_attn(p, seed, pre + ".self", cfg.d_model);
        add_norm(p, seed, pre + ".norm1", cfg.d_model);
        add_attn(p, seed, pre + ".cross", cfg.d_model);
        add_norm(p, seed, pre + ".norm2", cfg.d_model);
        add_ffn(p, seed, pre + ".ffn", cfg.d_model, cfg.d_ffn);
        add_norm(p, seed, pre + ".norm3", cfg.d_model);
    }
    return p;
}

ModelParams clone_params(const ModelParams& params) {
    ModelParams out;
    for (const auto& [path, t] : params)
        out[path] = Tensor::from(t.shape(), t.data(), t.requires_grad());
    return out;
}

void set_requires_grad(ModelParams& params, bool rg) {
    for (auto& [path, t] : params) t.set_requires_grad(rg);
}

void zero_grads(ModelParams& params) {
    for (auto& [path, t] : params) t.zero_grad();
}

std::size_t param_count(const ModelParams& params, const std::string& prefix) {
    std::size_t n = 0;
    for (const auto& [path, t] : params)
        if (path.rfind(prefix, 0) == 0) n += t.size();
    return n;
}

namespace {

const Tensor& pget(const Forward& f, const std::string& path) {
    auto it = f.params->find(path);
    if (it == f.params->end())
        throw std::invalid_argument("missing parameter " + path);
    return it->second;
}

Tensor drop(const Forward& f, const Tensor& x) {
    if (!f.train || f.cfg->dropout_rate == 0.0) return x;
    if (!f.rng) throw std::invalid_argument("forward: training mode needs an RNG");
    return dropout(x, f.cfg->dropout_rate, *f.rng, true);
}

// sinusoidal positions added to sqrt(d)-scaled embeddings
Tensor embed_with_positions(const Forward& f, const Tensor& table,
                            const std::vector<int>& ids, int rows, int len) {
    const int d = f.cfg->d_model;
    Tensor e = embedding(table, ids);
    e = reshape(scale(e, std::sqrt(static_cast<double>(d))), {rows, len, d});
    std::vector<double> pe(static_cast<std::size_t>(len) * d);
    for (int pos = 0; pos < len; ++pos)
        for (int i = 0; i < d; ++i) {
            const double angle =
                pos / std::pow(10000.0, 2.0 * (i / 2) / static_cast<double>(d));
            pe[pos * d + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    Tensor pos_t = Tensor::from({len, d}, std::move(pe));
    return drop(f, add(e, pos_t));
}

Tensor post_norm(const Forward& f, const std::string& prefix, const Tensor& residual,
                 const Tensor& sub) {
    return layer_norm(add(residual, drop(f, sub)), pget(f, prefix + ".gain"),
                      pget(f, prefix + ".bias"));
}

Tensor ffn_block(const Forward& f, const std::string& prefix, const Tensor& x) {
    Tensor h = relu(add(linear(x, pget(f, prefix + ".w1")), pget(f, prefix + ".b1")));
    return add(linear(h, pget(f, prefix + ".w2")), pget(f, prefix + ".b2"));
}

void check_batch_side(const ModelConfig& cfg, int len, int vocab,
                      const std::vector<int>& ids, const char* side) {
    if (len > cfg.max_len)
        throw std::invalid_argument(std::string(side) + " length " +
                                    std::to_string(len) + " exceeds max_len " +
                                    std::to_string(cfg.max_len));
    for (int id : ids)
        if (id < 0 || id >= vocab)
            throw std::invalid_argument(std::string(side) + " id " + std::to_string(id) +
                                        " out of vocabulary of size " +
                                        std::to_string(vocab));
}

}  // namespace

Tensor mha(const Forward& f, const std::string& prefix, const Tensor& q_in,
           const Tensor& kv_in, const Tensor& allowed) {
    const int h = f.cfg->n_heads;
    const int dh = f.cfg->d_model / h;
    Tensor q = head_split(linear(q_in, pget(f, prefix + ".wq")), h);
    Tensor k = head_split(linear(kv_in, pget(f, prefix + ".wk")), h);
    Tensor v = head_split(linear(kv_in, pget(f, prefix + ".wv")), h);
    Tensor scores = scale(bmm_bt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    scores = masked_fill(scores, allowed, -1e9);
    Tensor attn = softmax_last(scores);
    Tensor ctx = head_merge(bmm(attn, v), h);
    return linear(ctx, pget(f, prefix + ".wo"));
}

Tensor expand_src_mask(const ModelConfig& cfg, const std::vector<double>& src_mask,
                       int rows, int tq, int tk) {
    std::vector<double> m(static_cast<std::size_t>(rows) * cfg.n_heads * tq * tk);
    std::size_t o = 0;
    for (int b = 0; b < rows; ++b)
        for (int h = 0; h < cfg.n_heads; ++h)
            for (int i = 0; i < tq; ++i)
                for (int j = 0; j < tk; ++j) m[o++] = src_mask[b * tk + j];
    return Tensor::from({rows * cfg.n_heads, tq, tk}, std::move(m));
}

Tensor causal_mask(const ModelConfig& cfg, const std::vector<double>& tgt_mask,
                   int rows, int t) {
    std::vector<double> m(static_cast<std::size_t>(rows) * cfg.n_heads * t * t);
    std::size_t o = 0;
    for (int b = 0; b < rows; ++b)
        for (int h = 0; h < cfg.n_heads; ++h)
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < t; ++j)
                    m[o++] = (j <= i && tgt_mask[b * t + j] != 0.0) ? 1.0 : 0.0;
    return Tensor::from({rows * cfg.n_heads, t, t}, std::move(m));
}

Tensor encode(const Forward& f, const data::Batch& b) {
    const ModelConfig& cfg = *f.cfg;
    check_batch_side(cfg, b.src_len, cfg.vocab_size_src, b.src, "source");
    Tensor x = embed_with_positions(f, pget(f, "src_embed"), b.src, b.rows, b.src_len);
    Tensor attn_mask = expand_src_mask(cfg, b.src_mask, b.rows, b.src_len, b.src_len);
    for (int l = 0; l < cfg.n_enc_layers; ++l) {
        const std::string pre = "enc.l" + std::to_string(l);
        x = post_norm(f, pre + ".norm1", x, mha(f, pre + ".attn", x, x, attn_mask));
        x = post_norm(f, pre + ".norm2", x, ffn_block(f, pre + ".ffn", x));
    }
    return x;
}

Tensor decode_logits(const Forward& f, const Tensor& memory, const data::Batch& b) {
    const ModelConfig& cfg = *f.cfg;
    check_batch_side(cfg, b.tgt_len, cfg.vocab_size_tgt, b.tgt_in, "target");
    Tensor x = embed_with_positions(f, pget(f, "tgt_embed"), b.tgt_in, b.rows, b.tgt_len);
    Tensor self_mask = causal_mask(cfg, b.tgt_mask, b.rows, b.tgt_len);
    Tensor cross = expand_src_mask(cfg, b.src_mask, b.rows, b.tgt_len, b.src_len);
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
        const std::string pre = "dec.l" + std::to_string(l);
        x = post_norm(f, pre + ".norm1", x, mha(f, pre + ".self", x, x, self_mask));
        x = post_norm(f, pre + ".norm2", x, mha(f, pre + ".cross", x, memory, cross));
        x = post_norm(f, pre + ".norm3", x, ffn_block(f, pre + ".ffn", x));
    }
    return linear(x, pget(f, "out_proj"));
}

Tensor nll_loss(const Tensor& logits, const data::Batch& b) {
    const Shape& s = logits.shape();
    if (s.size() != 3 || s[0] != b.rows || s[1] != b.tgt_len)
        throw std::invalid_argument("nll_loss: logits " + shape_str(s) +
                                    " do not match batch " + std::to_string(b.rows) +
                                    "x" + std::to_string(b.tgt_len));
    double count = 0.0;
    for (double m : b.tgt_mask) count += m != 0.0 ? 1.0 : 0.0;
    if (count == 0.0) throw std::invalid_argument("nll_loss: all target tokens masked");
    Tensor logp = log_softmax_last(logits);
    Tensor picked = gather_last(logp, b.tgt_out);  // [rows, tgt_len]
    Tensor mask = Tensor::from({b.rows, b.tgt_len}, b.tgt_mask);
    return scale(sum_all(mul(picked, mask)), -1.0 / count);
}

std::vector<std::vector<int>> greedy_decode(const Forward& f, const Tensor& memory,
                                            const data::Batch& b, int max_steps) {
    const ModelConfig& cfg = *f.cfg;
    if (max_steps > cfg.max_len)
        throw std::invalid_argument("greedy_decode: max_steps exceeds max_len");
    NoGradGuard ng;
    Forward eval{f.cfg, f.params, false, nullptr};

    std::vector<std::vector<int>> out(b.rows);
    if (max_steps == 0) return out;
    std::vector<bool> done(b.rows, false);

    for (int step = 0; step < max_steps; ++step) {
        const int t = step + 1;
        data::Batch cur;
        cur.domain = b.domain;
        cur.rows = b.rows;
        cur.src_len = b.src_len;
        cur.tgt_len = t;
        cur.src = b.src;
        cur.src_mask = b.src_mask;
        cur.tgt_in.assign(static_cast<std::size_t>(b.rows) * t, cfg.pad_id);
        cur.tgt_out.assign(cur.tgt_in.size(), cfg.pad_id);
        cur.tgt_mask.assign(cur.tgt_in.size(), 1.0);
        for (int r = 0; r < b.rows; ++r) {
            cur.tgt_in[r * t] = cfg.bos_id;
            for (int j = 0; j < step; ++j)
                cur.tgt_in[r * t + j + 1] =
                    j < static_cast<int>(out[r].size()) ? out[r][j] : cfg.eos_id;
        }
        Tensor logits = decode_logits(eval, memory, cur);
        const int v = cfg.vocab_size_tgt;
        bool all_done = true;
        for (int r = 0; r < b.rows; ++r) {
            if (done[r]) continue;
            const double* row = logits.data().data() +
                                (static_cast<std::size_t>(r) * t + (t - 1)) * v;
            int best = 0;
            for (int k = 1; k < v; ++k)
                if (row[k] > row[best]) best = k;
            if (best == cfg.eos_id)
                done[r] = true;
            else
                out[r].push_back(best);
            all_done = all_done && done[r];
        }
        if (all_done) break;
    }
    return out;
}

}  // namespace dtn::model
