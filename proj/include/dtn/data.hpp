#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

// Vocabulary, synthetic multi-domain corpus generation, corpus file I/O,
// batching, and the balance-factor domain sampler.
namespace dtn::data {

struct Vocabulary {
    std::vector<std::string> tokens;  // id -> token; specials at the lowest ids

    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int unk_id = 3;

    // specials, then one <dN> tag per domain, then alphabet tokens a0..
    static Vocabulary build(int alphabet_size, int n_domain_tags);

    int size() const { return static_cast<int>(tokens.size()); }
    int id_of(const std::string& tok) const;  // unk_id if missing
    const std::string& token(int id) const;
    int domain_tag(int domain) const;  // id of <d{domain}>
    int alphabet_base() const { return 4 + n_tags; }
    int alphabet_size() const { return size() - alphabet_base(); }

    int n_tags = 0;
};

using Pair = std::pair<std::vector<int>, std::vector<int>>;

struct DomainCorpus {
    int domain = 0;
    std::string rule_name;
    std::vector<Pair> pairs;
};

// Padded index matrices for one single-domain batch. Masks are 1 on real
// tokens, 0 on padding. tgt_in is BOS-shifted, tgt_out ends with EOS.
struct Batch {
    int domain = 0;
    int rows = 0;
    int src_len = 0;
    int tgt_len = 0;
    std::vector<int> src;     // rows * src_len
    std::vector<int> tgt_in;  // rows * tgt_len
    std::vector<int> tgt_out;
    std::vector<double> src_mask;
    std::vector<double> tgt_mask;
    std::vector<std::size_t> origin;  // row -> index into the source corpus
};

struct GenParams {
    std::uint64_t seed = 0;
    std::uint64_t source_seed = 0;  // 0: draw sources from `seed`; the cipher
                                    // and rules always come from `seed`
    int n_domains = 4;
    std::vector<int> sizes;  // pairs per domain
    int min_len = 3;
    int max_len = 12;
    int alphabet_size = 24;
};

// Every domain shares one substitution cipher over the alphabet, composed
// with a per-domain rule: 0 identity, 1 reversal, 2 cyclic shift by +1,
// 3 keep odd positions (minimum output length 1). Sources are drawn with a
// domain-biased unigram distribution so domains are partially separable.
std::vector<DomainCorpus> generate_synthetic(const Vocabulary& vocab,
                                             const GenParams& params);

// Applies domain `domain`'s rule (with the cipher for `seed`) to one source
// sentence of vocabulary ids; used by generation and by rule-checking tests.
std::vector<int> apply_domain_rule(const Vocabulary& vocab, std::uint64_t seed,
                                   int domain, const std::vector<int>& src);

struct SamplerState {
    std::vector<double> counts;  // n_i, batches per domain
    double alpha = 0.7;
    std::mt19937_64 rng;

    SamplerState(std::vector<double> n, double a, std::uint64_t seed);
    // q_i = p_i^alpha / sum_j p_j^alpha with p_i = n_i / sum_k n_k
    std::vector<double> probabilities() const;
    int sample();
};

std::vector<Batch> make_batches(const DomainCorpus& corpus, int batch_tokens,
                                int pad_id, int bos_id, int eos_id);

// UTF-8 text, one pair per line: "src tokens<TAB>tgt tokens"
void save_corpus(const DomainCorpus& corpus, const Vocabulary& vocab,
                 const std::string& path);
DomainCorpus load_corpus(const std::string& path, const Vocabulary& vocab,
                         int domain);

void save_manifest(const std::vector<std::string>& domain_names,
                   const std::string& path);
std::vector<std::string> load_manifest(const std::string& path);

}  // namespace dtn::data
