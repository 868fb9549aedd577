#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dtn/data.hpp"
#include "dtn/tensor.hpp"

// Transformer encoder-decoder at toy scale. Parameters live in a flat map
// keyed by path (enc.l0.attn.wq, ...) so teachers, DTN banks and domain
// classifiers can share one container and one checkpoint format.
namespace dtn::model {

struct ModelConfig {
    int vocab_size_src = 0;
    int vocab_size_tgt = 0;
    int d_model = 64;
    int n_heads = 4;
    int n_enc_layers = 2;
    int n_dec_layers = 2;
    int d_ffn = 128;
    int max_len = 64;
    double dropout_rate = 0.1;
    int pad_id = 0;
    int bos_id = 1;
    int eos_id = 2;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

using ModelParams = std::map<std::string, ag::Tensor>;

ModelParams init_nmt_params(const ModelConfig& cfg, std::uint64_t seed);
ModelParams clone_params(const ModelParams& params);
void set_requires_grad(ModelParams& params, bool rg);
void zero_grads(ModelParams& params);
std::size_t param_count(const ModelParams& params, const std::string& prefix = "");

// uniform Xavier init helper shared by the DTN bank and classifiers
ag::Tensor xavier_init(const ag::Shape& shape, std::mt19937_64& rng);

struct Forward {
    const ModelConfig* cfg = nullptr;
    const ModelParams* params = nullptr;
    bool train = false;              // enables dropout
    std::mt19937_64* rng = nullptr;  // required when train is set
};

// multi-head attention block reading weights at `prefix` (wq/wk/wv/wo);
// `allowed` is a 0/1 tensor of shape [rows*heads, Tq, Tk]
ag::Tensor mha(const Forward& f, const std::string& prefix, const ag::Tensor& q_in,
               const ag::Tensor& kv_in, const ag::Tensor& allowed);

// 0/1 attention masks expanded to [rows*heads, Tq, Tk]
ag::Tensor expand_src_mask(const ModelConfig& cfg, const std::vector<double>& src_mask,
                           int rows, int tq, int tk);
ag::Tensor causal_mask(const ModelConfig& cfg, const std::vector<double>& tgt_mask,
                       int rows, int t);

ag::Tensor encode(const Forward& f, const data::Batch& b);
ag::Tensor decode_logits(const Forward& f, const ag::Tensor& memory,
                         const data::Batch& b);
ag::Tensor nll_loss(const ag::Tensor& logits, const data::Batch& b);

// greedy argmax decoding from a given memory; outputs exclude BOS/EOS
std::vector<std::vector<int>> greedy_decode(const Forward& f, const ag::Tensor& memory,
                                            const data::Batch& b, int max_steps);

}  // namespace dtn::model
