#include "dtn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include "dtn/optim.hpp"
#include "dtn/supervision.hpp"

namespace dtn::eval {

using ag::Tensor;

namespace {

constexpr int kMaxOrder = 4;

// per-sentence sufficient statistics for corpus BLEU, so the bootstrap can
// rescore subsets by summation
struct BleuStats {
    std::array<double, kMaxOrder> matches{};
    std::array<double, kMaxOrder> totals{};
    double hyp_len = 0;
    double ref_len = 0;
};

std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& s, int n) {
    std::map<std::vector<int>, int> counts;
    for (int i = 0; i + n <= static_cast<int>(s.size()); ++i)
        ++counts[std::vector<int>(s.begin() + i, s.begin() + i + n)];
    return counts;
}

BleuStats sentence_stats(const std::vector<int>& hyp, const std::vector<int>& ref) {
    BleuStats st;
    st.hyp_len = static_cast<double>(hyp.size());
    st.ref_len = static_cast<double>(ref.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
        auto hc = ngram_counts(hyp, n);
        auto rc = ngram_counts(ref, n);
        for (const auto& [gram, c] : hc) {
            st.totals[n - 1] += c;
            auto it = rc.find(gram);
            if (it != rc.end()) st.matches[n - 1] += std::min(c, it->second);
        }
    }
    return st;
}

double bleu_from_stats(const std::vector<BleuStats>& stats,
                       const std::vector<std::size_t>& idx) {
    BleuStats sum;
    for (std::size_t i : idx) {
        const BleuStats& s = stats[i];
        for (int n = 0; n < kMaxOrder; ++n) {
            sum.matches[n] += s.matches[n];
            sum.totals[n] += s.totals[n];
        }
        sum.hyp_len += s.hyp_len;
        sum.ref_len += s.ref_len;
    }
    double log_prec = 0.0;
    for (int n = 0; n < kMaxOrder; ++n) {
        if (sum.matches[n] == 0.0 || sum.totals[n] == 0.0) return 0.0;
        log_prec += std::log(sum.matches[n] / sum.totals[n]);
    }
    const double bp =
        sum.hyp_len < sum.ref_len ? std::exp(1.0 - sum.ref_len / sum.hyp_len) : 1.0;
    return 100.0 * bp * std::exp(log_prec / kMaxOrder);
}

std::vector<BleuStats> all_stats(const Sentences& hyps, const Sentences& refs) {
    if (hyps.empty()) throw std::invalid_argument("bleu: no hypotheses");
    if (hyps.size() != refs.size())
        throw std::invalid_argument("bleu: " + std::to_string(hyps.size()) +
                                    " hypotheses vs " + std::to_string(refs.size()) +
                                    " references");
    std::vector<BleuStats> stats(hyps.size());
    for (std::size_t i = 0; i < hyps.size(); ++i)
        stats[i] = sentence_stats(hyps[i], refs[i]);
    return stats;
}

std::vector<std::size_t> identity_index(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

}  // namespace

double bleu(const Sentences& hypotheses, const Sentences& references) {
    auto stats = all_stats(hypotheses, references);
    return bleu_from_stats(stats, identity_index(stats.size()));
}

double bootstrap_significance(const Sentences& hyps_a, const Sentences& hyps_b,
                              const Sentences& refs, int n_resamples,
                              std::uint64_t seed) {
    if (hyps_a.size() != hyps_b.size())
        throw std::invalid_argument("bootstrap_significance: misaligned systems");
    if (n_resamples < 1)
        throw std::invalid_argument("bootstrap_significance: n_resamples < 1");
    auto stats_a = all_stats(hyps_a, refs);
    auto stats_b = all_stats(hyps_b, refs);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, refs.size() - 1);
    double score = 0.0;
    std::vector<std::size_t> idx(refs.size());
    for (int r = 0; r < n_resamples; ++r) {
        for (auto& i : idx) i = pick(rng);
        const double a = bleu_from_stats(stats_a, idx);
        const double b = bleu_from_stats(stats_b, idx);
        if (a > b)
            score += 1.0;
        else if (a == b)
            score += 0.5;
    }
    return score / n_resamples;
}

Sentences decode_corpus(const model::ModelConfig& cfg,
                        const model::ModelParams& params,
                        const data::DomainCorpus& corpus,
                        const DecodeOptions& opt) {
    ag::NoGradGuard ng;
    model::Forward f{&cfg, &params};
    data::DomainCorpus work = corpus;
    if (opt.prepend_tag >= 0)
        for (auto& [src, tgt] : work.pairs) src.insert(src.begin(), opt.prepend_tag);
    Sentences out(work.pairs.size());
    for (const auto& b : data::make_batches(work, opt.batch_tokens, cfg.pad_id,
                                            cfg.bos_id, cfg.eos_id)) {
        Tensor h = model::encode(f, b);
        Tensor memory =
            opt.dtn_domain >= 0 ? transform::transform(f, h, b, opt.dtn_domain) : h;
        auto decoded = model::greedy_decode(f, memory, b, cfg.max_len);
        for (int r = 0; r < b.rows; ++r) out[b.origin[r]] = std::move(decoded[r]);
    }
    return out;
}

bool CrossMatrix::all_columns_dominant() const {
    for (bool d : diag_dominant)
        if (!d) return false;
    return !diag_dominant.empty();
}

CrossMatrix cross_domain_matrix(const model::ModelConfig& cfg,
                                const model::ModelParams& params,
                                const std::vector<data::DomainCorpus>& tests,
                                int batch_tokens) {
    const int n = transform::dtn_domains(params);
    if (n < 1)
        throw std::invalid_argument("cross_domain_matrix: checkpoint has no DTN bank");
    if (static_cast<int>(tests.size()) != n)
        throw std::invalid_argument("cross_domain_matrix: " + std::to_string(n) +
                                    " domains but " + std::to_string(tests.size()) +
                                    " test corpora");
    CrossMatrix m;
    m.n = n;
    m.bleu.assign(n * n, 0.0);
    for (int j = 0; j < n; ++j) {
        if (tests[j].pairs.empty())
            throw std::invalid_argument("cross_domain_matrix: empty test corpus for domain " +
                                        std::to_string(j));
        Sentences refs;
        for (const auto& p : tests[j].pairs) refs.push_back(p.second);
        for (int i = 0; i < n; ++i) {
            DecodeOptions opt;
            opt.batch_tokens = batch_tokens;
            opt.dtn_domain = i;
            m.bleu[i * n + j] = bleu(decode_corpus(cfg, params, tests[j], opt), refs);
        }
    }
    m.diag_dominant.assign(n, false);
    for (int j = 0; j < n; ++j) {
        bool best = true;
        for (int i = 0; i < n; ++i)
            if (m.at(i, j) > m.at(j, j)) best = false;
        m.diag_dominant[j] = best;
    }
    return m;
}

ProbeSite site_from_string(const std::string& s) {
    if (s == "encoder_out") return ProbeSite::encoder_out;
    if (s == "dtn_out") return ProbeSite::dtn_out;
    throw std::invalid_argument("unknown probe site '" + s +
                                "' (expected encoder_out or dtn_out)");
}

namespace {

struct FrozenReps {
    Tensor h;  // [rows, len, d], constant
    data::Batch batch;
};

// frozen token-level representations at the probe site, one entry per batch
std::vector<FrozenReps> frozen_reps(const model::ModelConfig& cfg,
                                    const model::ModelParams& params,
                                    const data::DomainCorpus& corpus, ProbeSite site,
                                    int batch_tokens) {
    ag::NoGradGuard ng;
    model::Forward f{&cfg, &params};
    std::vector<FrozenReps> out;
    for (const auto& b : data::make_batches(corpus, batch_tokens, cfg.pad_id,
                                            cfg.bos_id, cfg.eos_id)) {
        Tensor h = model::encode(f, b);
        if (site == ProbeSite::dtn_out) {
            if (!transform::has_dtn(params))
                throw std::invalid_argument("probe at dtn_out: checkpoint has no DTN bank");
            h = transform::transform(f, h, b, b.domain);
        }
        out.push_back({ag::detach(h), b});
    }
    return out;
}

data::DomainCorpus subset(const data::DomainCorpus& c, bool even) {
    data::DomainCorpus out;
    out.domain = c.domain;
    out.rule_name = c.rule_name;
    for (std::size_t i = even ? 0 : 1; i < c.pairs.size(); i += 2)
        out.pairs.push_back(c.pairs[i]);
    return out;
}

}  // namespace

double probe_classifier_accuracy(const model::ModelConfig& cfg,
                                 const model::ModelParams& params,
                                 const std::vector<data::DomainCorpus>& corpora,
                                 ProbeSite site, std::uint64_t seed,
                                 int batch_tokens, int steps) {
    const int n = static_cast<int>(corpora.size());
    if (n < 1) throw std::invalid_argument("probe: no corpora");

    std::vector<FrozenReps> train_reps, test_reps;
    for (const auto& c : corpora) {
        auto held_in = subset(c, true);
        auto held_out = subset(c, false);
        if (held_in.pairs.empty() || held_out.pairs.empty())
            throw std::invalid_argument("probe: domain " + std::to_string(c.domain) +
                                        " too small to split");
        auto a = frozen_reps(cfg, params, held_in, site, batch_tokens);
        auto b = frozen_reps(cfg, params, held_out, site, batch_tokens);
        train_reps.insert(train_reps.end(), a.begin(), a.end());
        test_reps.insert(test_reps.end(), b.begin(), b.end());
    }

    std::mt19937_64 rng(seed);
    model::ModelParams probe;
    probe["probe.query"] = model::xavier_init({cfg.d_model}, rng);
    probe["probe.w"] = model::xavier_init({cfg.d_model, n}, rng);

    optim::AdamConfig acfg;
    acfg.d_model = cfg.d_model;
    optim::Adam adam(acfg);
    for (int s = 0; s < steps; ++s) {
        Tensor loss = Tensor::scalar(0.0);
        int rows = 0;
        for (const auto& r : train_reps) {
            Tensor pooled =
                supervision::attention_pool(r.h, r.batch, probe.at("probe.query"));
            Tensor lp = ag::log_softmax_last(ag::linear(pooled, probe.at("probe.w")));
            std::vector<int> labels(r.batch.rows, r.batch.domain);
            loss = ag::add(loss, ag::scale(ag::sum_all(ag::gather_last(lp, labels)), -1.0));
            rows += r.batch.rows;
        }
        ag::backward(ag::scale(loss, 1.0 / rows));
        adam.step(probe);
    }

    ag::NoGradGuard ng;
    int correct = 0, total = 0;
    for (const auto& r : test_reps) {
        Tensor pooled =
            supervision::attention_pool(r.h, r.batch, probe.at("probe.query"));
        Tensor logits = ag::linear(pooled, probe.at("probe.w"));
        for (int row = 0; row < r.batch.rows; ++row) {
            int best = 0;
            for (int k = 1; k < n; ++k)
                if (logits.data()[row * n + k] > logits.data()[row * n + best]) best = k;
            correct += best == r.batch.domain ? 1 : 0;
            ++total;
        }
    }
    return static_cast<double>(correct) / total;
}

std::vector<std::array<double, 2>> pca2(const std::vector<std::vector<double>>& points) {
    if (points.empty()) throw std::invalid_argument("pca2: no points");
    const std::size_t n = points.size(), d = points[0].size();
    std::vector<double> mean(d, 0.0);
    for (const auto& p : points) {
        if (p.size() != d) throw std::invalid_argument("pca2: ragged input");
        for (std::size_t j = 0; j < d; ++j) mean[j] += p[j];
    }
    for (auto& m : mean) m /= n;
    std::vector<std::vector<double>> x(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) x[i][j] = points[i][j] - mean[j];

    // covariance (d x d), then power iteration with deflation
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += x[i][a] * x[i][b] / n;

    auto power_iter = [&](const std::vector<double>& m) {
        std::vector<double> v(d, 1.0 / std::sqrt(static_cast<double>(d)));
        for (int it = 0; it < 200; ++it) {
            std::vector<double> w(d, 0.0);
            for (std::size_t a = 0; a < d; ++a)
                for (std::size_t b = 0; b < d; ++b) w[a] += m[a * d + b] * v[b];
            double norm = 0.0;
            for (double c : w) norm += c * c;
            norm = std::sqrt(norm);
            if (norm < 1e-300) return v;  // degenerate direction; keep previous
            for (std::size_t a = 0; a < d; ++a) v[a] = w[a] / norm;
        }
        return v;
    };

    std::vector<double> v1 = power_iter(cov);
    double lam1 = 0.0;
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) lam1 += v1[a] * cov[a * d + b] * v1[b];
    std::vector<double> deflated = cov;
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) deflated[a * d + b] -= lam1 * v1[a] * v1[b];
    std::vector<double> v2 = power_iter(deflated);

    std::vector<std::array<double, 2>> proj(n);
    for (std::size_t i = 0; i < n; ++i) {
        double p1 = 0, p2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
            p1 += x[i][j] * v1[j];
            p2 += x[i][j] * v2[j];
        }
        proj[i] = {p1, p2};
    }
    return proj;
}

void export_representations(const model::ModelConfig& cfg,
                            const model::ModelParams& params,
                            const std::vector<data::DomainCorpus>& corpora,
                            const std::string& out_path, int batch_tokens) {
    struct Row {
        std::size_t sentence_id;
        int domain;
        std::string site;
        std::vector<double> rep;
    };
    std::vector<Row> rows;
    std::size_t next_id = 0;
    const bool with_dtn = transform::has_dtn(params);
    ag::NoGradGuard ng;
    model::Forward f{&cfg, &params};
    for (const auto& c : corpora) {
        const std::size_t base = next_id;
        next_id += c.pairs.size();
        for (const auto& b : data::make_batches(c, batch_tokens, cfg.pad_id,
                                                cfg.bos_id, cfg.eos_id)) {
            Tensor h = model::encode(f, b);
            Tensor hp = with_dtn ? transform::transform(f, h, b, b.domain) : h;
            auto pool = [&](const Tensor& t, int r) {
                std::vector<double> rep(cfg.d_model, 0.0);
                double cnt = 0.0;
                for (int j = 0; j < b.src_len; ++j) {
                    if (b.src_mask[r * b.src_len + j] == 0.0) continue;
                    cnt += 1.0;
                    for (int k = 0; k < cfg.d_model; ++k)
                        rep[k] += t.data()[(r * b.src_len + j) * cfg.d_model + k];
                }
                for (auto& v : rep) v /= cnt;
                return rep;
            };
            for (int r = 0; r < b.rows; ++r) {
                const std::size_t sid = base + b.origin[r];
                rows.push_back({sid, c.domain, "H", pool(h, r)});
                rows.push_back({sid, c.domain, "H'", pool(hp, r)});
            }
        }
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        return std::tie(a.sentence_id, a.site) < std::tie(b.sentence_id, b.site);
    });

    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << "sentence_id,domain,site";
    for (int k = 0; k < cfg.d_model; ++k) out << ",f" << k;
    out << "\n";
    out.precision(17);
    for (const auto& r : rows) {
        out << r.sentence_id << "," << r.domain << "," << r.site;
        for (double v : r.rep) out << "," << v;
        out << "\n";
    }
    if (!out) throw std::runtime_error("write failure on " + out_path);
    out.close();

    std::vector<std::vector<double>> pts;
    for (const auto& r : rows) pts.push_back(r.rep);
    auto proj = pca2(pts);
    const std::string proj_path = out_path + ".proj.csv";
    std::ofstream pout(proj_path);
    if (!pout) throw std::runtime_error("cannot write " + proj_path);
    pout << "sentence_id,domain,site,pc1,pc2\n";
    pout.precision(17);
    for (std::size_t i = 0; i < rows.size(); ++i)
        pout << rows[i].sentence_id << "," << rows[i].domain << "," << rows[i].site
             << "," << proj[i][0] << "," << proj[i][1] << "\n";
    if (!pout) throw std::runtime_error("write failure on " + proj_path);
}

EvalReport make_report(const std::vector<std::string>& domain_names,
                       const std::vector<double>& per_domain) {
    if (domain_names.size() != per_domain.size())
        throw std::invalid_argument("make_report: names/scores mismatch");
    if (per_domain.empty()) throw std::invalid_argument("make_report: empty report");
    EvalReport r;
    r.domain_names = domain_names;
    r.per_domain = per_domain;
    for (double b : per_domain) r.average += b;
    r.average /= per_domain.size();
    return r;
}

std::string EvalReport::to_text() const {
    std::ostringstream os;
    os.precision(2);
    os << std::fixed;
    os << "domain      BLEU";
    if (!reference_name.empty()) os << "    d(" << reference_name << ")  sig";
    os << "\n";
    for (std::size_t i = 0; i < per_domain.size(); ++i) {
        os << domain_names[i];
        for (std::size_t p = domain_names[i].size(); p < 12; ++p) os << ' ';
        os << per_domain[i];
        if (!reference_name.empty()) {
            os << "    " << (deltas[i] >= 0 ? "+" : "") << deltas[i] << "  "
               << (significant[i] ? "*" : "-");
        }
        os << "\n";
    }
    os << "Avg.        " << average << "\n";
    if (!checkpoint_hash.empty()) os << "checkpoint " << checkpoint_hash << "\n";
    if (!config_summary.empty()) os << "config " << config_summary << "\n";
    os << "seed " << seed << "\n";
    return os.str();
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "domain,bleu,delta,significant,checkpoint,seed\n";
    for (std::size_t i = 0; i < per_domain.size(); ++i) {
        os << domain_names[i] << "," << per_domain[i] << ",";
        if (!reference_name.empty())
            os << deltas[i] << "," << (significant[i] ? 1 : 0);
        else
            os << ",";
        os << "," << checkpoint_hash << "," << seed << "\n";
    }
    os << "Avg.," << average << ",,," << checkpoint_hash << "," << seed << "\n";
    return os.str();
}

}  // namespace dtn::eval
