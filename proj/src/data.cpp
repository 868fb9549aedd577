#include "dtn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace dtn::data {

Vocabulary Vocabulary::build(int alphabet_size, int n_domain_tags) {
    if (alphabet_size < 4)
        throw std::invalid_argument("vocabulary: alphabet_size must be >= 4, got " +
                                    std::to_string(alphabet_size));
    Vocabulary v;
    v.n_tags = n_domain_tags;
    v.tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (int d = 0; d < n_domain_tags; ++d) v.tokens.push_back("<d" + std::to_string(d) + ">");
    for (int a = 0; a < alphabet_size; ++a) v.tokens.push_back("a" + std::to_string(a));
    return v;
}

int Vocabulary::id_of(const std::string& tok) const {
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] == tok) return static_cast<int>(i);
    return unk_id;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size())
        throw std::invalid_argument("vocabulary: id " + std::to_string(id) +
                                    " out of range");
    return tokens[id];
}

int Vocabulary::domain_tag(int domain) const {
    if (domain < 0 || domain >= n_tags)
        throw std::invalid_argument("vocabulary: no tag token for domain " +
                                    std::to_string(domain));
    return 4 + domain;
}

namespace {

std::vector<int> make_cipher(int alphabet_size, std::uint64_t seed) {
    std::vector<int> sigma(alphabet_size);
    std::iota(sigma.begin(), sigma.end(), 0);
    std::mt19937_64 rng(seed ^ 0x51c7a9e2ULL);
    std::shuffle(sigma.begin(), sigma.end(), rng);
    return sigma;
}

}  // namespace

std::vector<int> apply_domain_rule(const Vocabulary& vocab, std::uint64_t seed,
                                   int domain, const std::vector<int>& src) {
    const int base = vocab.alphabet_base();
    const int a_size = vocab.alphabet_size();
    std::vector<int> letters;
    letters.reserve(src.size());
    for (int id : src) {
        if (id < base || id >= vocab.size())
            throw std::invalid_argument("apply_domain_rule: id " + std::to_string(id) +
                                        " is not an alphabet token");
        letters.push_back(id - base);
    }
    std::vector<int> out;
    switch (domain) {
        case 0:
            out = letters;
            break;
        case 1:
            out.assign(letters.rbegin(), letters.rend());
            break;
        case 2:
            for (int a : letters) out.push_back((a + 1) % a_size);
            break;
        case 3:
            for (std::size_t i = 1; i < letters.size(); i += 2) out.push_back(letters[i]);
            if (out.empty()) out.push_back(letters.front());
            break;
        default:
            throw std::invalid_argument("apply_domain_rule: unknown domain " +
                                        std::to_string(domain));
    }
    const auto sigma = make_cipher(a_size, seed);
    for (int& a : out) a = base + sigma[a];
    return out;
}

std::vector<DomainCorpus> generate_synthetic(const Vocabulary& vocab,
                                             const GenParams& p) {
    if (p.alphabet_size < 4)
        throw std::invalid_argument("generate_synthetic: alphabet_size must be >= 4");
    if (static_cast<int>(p.sizes.size()) != p.n_domains)
        throw std::invalid_argument("generate_synthetic: sizes has " +
                                    std::to_string(p.sizes.size()) + " entries for " +
                                    std::to_string(p.n_domains) + " domains");
    if (p.n_domains < 1 || p.n_domains > 4)
        throw std::invalid_argument("generate_synthetic: n_domains must be in [1,4]");
    if (vocab.alphabet_size() != p.alphabet_size)
        throw std::invalid_argument("generate_synthetic: vocabulary alphabet mismatch");

    static const char* kRuleNames[4] = {"identity", "reverse", "shift1", "drop_even"};
    const int base = vocab.alphabet_base();
    const int block = std::max(1, p.alphabet_size / p.n_domains);

    std::vector<DomainCorpus> out;
    for (int d = 0; d < p.n_domains; ++d) {
        // independent stream per domain so corpora are stable under size changes
        const std::uint64_t src_seed = p.source_seed ? p.source_seed : p.seed;
        std::mt19937_64 rng(src_seed * 1000003ULL + static_cast<std::uint64_t>(d));
        std::uniform_int_distribution<int> len_dist(p.min_len, p.max_len);
        std::uniform_int_distribution<int> any_tok(0, p.alphabet_size - 1);
        std::uniform_int_distribution<int> pref_tok(0, block - 1);
        std::uniform_real_distribution<double> u(0.0, 1.0);

        DomainCorpus c;
        c.domain = d;
        c.rule_name = kRuleNames[d];
        for (int m = 0; m < p.sizes[d]; ++m) {
            const int len = len_dist(rng);
            std::vector<int> src(len);
            for (int& id : src) {
                // half of the mass sits on the domain's preferred block
                const int a = u(rng) < 0.5 ? (d * block + pref_tok(rng)) % p.alphabet_size
                                           : any_tok(rng);
                id = base + a;
            }
            c.pairs.emplace_back(src, apply_domain_rule(vocab, p.seed, d, src));
        }
        out.push_back(std::move(c));
    }
    return out;
}

SamplerState::SamplerState(std::vector<double> n, double a, std::uint64_t seed)
    : counts(std::move(n)), alpha(a), rng(seed) {
    double total = 0.0;
    for (double c : counts) {
        if (c < 0.0)
            throw std::invalid_argument("sampler: negative domain count");
        total += c;
    }
    if (total <= 0.0) throw std::invalid_argument("sampler: all domain counts are zero");
}

std::vector<double> SamplerState::probabilities() const {
    double total = 0.0;
    for (double c : counts) total += c;
    std::vector<double> q(counts.size());
    double z = 0.0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double p = counts[i] / total;
        q[i] = p > 0.0 ? std::pow(p, alpha) : 0.0;
        z += q[i];
    }
    for (double& v : q) v /= z;
    return q;
}

int SamplerState::sample() {
    const auto q = probabilities();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double r = u(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        acc += q[i];
        if (r < acc) return static_cast<int>(i);
    }
    return static_cast<int>(q.size()) - 1;
}

std::vector<Batch> make_batches(const DomainCorpus& corpus, int batch_tokens,
                                int pad_id, int bos_id, int eos_id) {
    // length-sorted bucketing; token budget counts the padded matrix size
    std::vector<std::size_t> order(corpus.pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto la = std::max(corpus.pairs[a].first.size(),
                                 corpus.pairs[a].second.size() + 1);
        const auto lb = std::max(corpus.pairs[b].first.size(),
                                 corpus.pairs[b].second.size() + 1);
        return la < lb;
    });

    std::vector<Batch> batches;
    std::vector<std::size_t> cur;
    std::size_t cur_max = 0;

    auto flush = [&] {
        if (cur.empty()) return;
        Batch b;
        b.domain = corpus.domain;
        b.rows = static_cast<int>(cur.size());
        int src_len = 0, tgt_len = 0;
        for (std::size_t idx : cur) {
            src_len = std::max<int>(src_len, corpus.pairs[idx].first.size());
            tgt_len = std::max<int>(tgt_len, corpus.pairs[idx].second.size() + 1);
        }
        b.src_len = src_len;
        b.tgt_len = tgt_len;
        b.src.assign(static_cast<std::size_t>(b.rows) * src_len, pad_id);
        b.tgt_in.assign(static_cast<std::size_t>(b.rows) * tgt_len, pad_id);
        b.tgt_out.assign(static_cast<std::size_t>(b.rows) * tgt_len, pad_id);
        b.src_mask.assign(b.src.size(), 0.0);
        b.tgt_mask.assign(b.tgt_in.size(), 0.0);
        b.origin = cur;
        for (int r = 0; r < b.rows; ++r) {
            const auto& [src, tgt] = corpus.pairs[cur[r]];
            for (std::size_t j = 0; j < src.size(); ++j) {
                b.src[r * src_len + j] = src[j];
                b.src_mask[r * src_len + j] = 1.0;
            }
            b.tgt_in[r * tgt_len + 0] = bos_id;
            b.tgt_mask[r * tgt_len + 0] = 1.0;
            for (std::size_t j = 0; j < tgt.size(); ++j) {
                b.tgt_in[r * tgt_len + j + 1] = tgt[j];
                b.tgt_out[r * tgt_len + j] = tgt[j];
                b.tgt_mask[r * tgt_len + j + 1] = 1.0;
            }
            b.tgt_out[r * tgt_len + tgt.size()] = eos_id;
        }
        batches.push_back(std::move(b));
        cur.clear();
        cur_max = 0;
    };

    for (std::size_t idx : order) {
        const auto& [src, tgt] = corpus.pairs[idx];
        if (src.empty() || tgt.empty())
            throw std::invalid_argument("make_batches: empty sentence at pair " +
                                        std::to_string(idx));
        const std::size_t len = std::max(src.size(), tgt.size() + 1);
        if (static_cast<int>(len) > batch_tokens)
            throw std::invalid_argument("make_batches: sentence " + std::to_string(idx) +
                                        " of length " + std::to_string(len) +
                                        " exceeds batch budget " +
                                        std::to_string(batch_tokens));
        const std::size_t new_max = std::max(cur_max, len);
        if (!cur.empty() &&
            (cur.size() + 1) * new_max > static_cast<std::size_t>(batch_tokens))
            flush();
        cur.push_back(idx);
        cur_max = std::max(cur_max, len);
    }
    flush();
    return batches;
}

void save_corpus(const DomainCorpus& corpus, const Vocabulary& vocab,
                 const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_corpus: cannot open " + path);
    for (const auto& [src, tgt] : corpus.pairs) {
        for (std::size_t i = 0; i < src.size(); ++i)
            out << (i ? " " : "") << vocab.token(src[i]);
        out << '\t';
        for (std::size_t i = 0; i < tgt.size(); ++i)
            out << (i ? " " : "") << vocab.token(tgt[i]);
        out << '\n';
    }
}

DomainCorpus load_corpus(const std::string& path, const Vocabulary& vocab,
                         int domain) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
    DomainCorpus c;
    c.domain = domain;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("load_corpus: missing tab separator at " + path +
                                     ":" + std::to_string(lineno));
        auto tokenize = [&](const std::string& s) {
            std::vector<int> ids;
            std::istringstream iss(s);
            std::string tok;
            while (iss >> tok) ids.push_back(vocab.id_of(tok));
            return ids;
        };
        Pair p{tokenize(line.substr(0, tab)), tokenize(line.substr(tab + 1))};
        if (p.first.empty() || p.second.empty())
            throw std::runtime_error("load_corpus: empty sentence at " + path + ":" +
                                     std::to_string(lineno));
        c.pairs.push_back(std::move(p));
    }
    return c;
}

void save_manifest(const std::vector<std::string>& domain_names,
                   const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_manifest: cannot open " + path);
    for (const auto& name : domain_names) out << name << '\n';
}

std::vector<std::string> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_manifest: cannot open " + path);
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) names.push_back(line);
    return names;
}

}  // namespace dtn::data
