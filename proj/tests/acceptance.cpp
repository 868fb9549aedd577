// Acceptance suite: ten standalone criteria, one PASS/FAIL line each.
// Exit code is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dtn/checkpoint.hpp"
#include "dtn/evaluation.hpp"
#include "dtn/stats.hpp"
#include "dtn/train.hpp"

using namespace dtn;
using ag::Tensor;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
    std::printf("criterion %2d %s  %s%s%s\n", id, pass ? "PASS" : "FAIL",
                what.c_str(), detail.empty() ? "" : " — ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor randt(const ag::Shape& s, unsigned seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(ag::numel(s));
    for (auto& x : v) x = u(rng);
    return Tensor::from(s, v);
}

data::Batch toy_batch(int rows, int src_len, int tgt_len, unsigned seed, int vocab,
                      int domain = 0) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> tok(4, vocab - 1);
    data::Batch b;
    b.domain = domain;
    b.rows = rows;
    b.src_len = src_len;
    b.tgt_len = tgt_len;
    b.src.resize(rows * src_len);
    b.tgt_in.resize(rows * tgt_len);
    b.tgt_out.resize(rows * tgt_len);
    b.src_mask.assign(rows * src_len, 1.0);
    b.tgt_mask.assign(rows * tgt_len, 1.0);
    for (auto& x : b.src) x = tok(rng);
    for (int r = 0; r < rows; ++r) {
        b.tgt_in[r * tgt_len] = 1;
        for (int j = 0; j < tgt_len; ++j) {
            const int t = tok(rng);
            b.tgt_out[r * tgt_len + j] = j + 1 < tgt_len ? t : 2;
            if (j + 1 < tgt_len) b.tgt_in[r * tgt_len + j + 1] = t;
        }
    }
    return b;
}

// ---- criterion 1: gradient suite -----------------------------------------

bool check(const std::function<Tensor(const Tensor&)>& f, const Tensor& p,
           double tol, std::string& worst) {
    auto rep = ag::grad_check(f, p, 1e-5, tol);
    if (!rep.pass)
        worst += " rel_err=" + std::to_string(rep.max_rel_err);
    return rep.pass;
}

bool gradient_suite(std::string& detail) {
    using ag::sum_all;
    auto sq = [](const Tensor& t) { return sum_all(ag::mul(t, t)); };
    bool ok = true;
    std::string worst;
    for (unsigned seed = 1; seed <= 3 && ok; ++seed) {
        const Tensor a = randt({3, 4}, seed), b3 = randt({2, 3, 4}, seed + 10);
        ok = ok && check([&](const Tensor& x) { return sq(ag::add(x, randt({3, 4}, 7))); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::add(b3, ag::reshape(x, {4}))); }, randt({4}, seed), 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::sub(x, randt({3, 4}, 8))); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::mul(x, randt({3, 4}, 9))); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::scale(x, -1.7)); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::add_scalar(x, 0.3)); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::linear(randt({2, 3}, 11), ag::reshape(x, {3, 4}))); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::matmul(ag::reshape(x, {3, 4}), randt({4, 2}, 12))); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::bmm(x, randt({2, 4, 3}, 13))); }, b3, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::bmm_bt(x, randt({2, 5, 4}, 14))); }, b3, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::transpose_last2(x)); }, b3, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::head_split(x, 2)); }, b3, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::head_merge(ag::head_split(x, 2), 2)); }, b3, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::concat({x, randt({3, 4}, 15)}, 0)); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::slice(x, 1, 1, 2)); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::embedding(x, {0, 2, 2, 1})); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::relu(x)); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::softmax_last(x)); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::log_softmax_last(x)); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::layer_norm(x, randt({4}, 16, 0.5, 1.5), randt({4}, 17))); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::layer_norm(randt({3, 4}, 18), x, randt({4}, 19))); }, randt({4}, seed, 0.5, 1.5), 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return ag::mean_all(ag::mul(x, x)); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::sum_last(x)); }, b3, 1e-4, worst);
        Tensor mask = randt({3, 4}, 20, 0.0, 1.0);
        for (auto& m : mask.data()) m = m < 0.5 ? 0.0 : 1.0;
        ok = ok && check([&](const Tensor& x) { return sq(ag::masked_fill(x, mask, -2.0)); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) { return sq(ag::gather_last(x, {1, 0, 3})); }, a, 1e-4, worst);
        ok = ok && check([&](const Tensor& x) {
            std::mt19937_64 r(99);
            return sq(ag::dropout(x, 0.4, r, true));
        }, a, 1e-4, worst);
    }
    if (!ok) {
        detail = "primitive check failed" + worst;
        return false;
    }

    // full model, every parameter
    model::ModelConfig cfg;
    cfg.vocab_size_src = cfg.vocab_size_tgt = 12;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.d_ffn = 16;
    cfg.max_len = 8;
    cfg.dropout_rate = 0.0;
    auto params = model::init_nmt_params(cfg, 21);
    auto b = toy_batch(2, 3, 4, 22, 12);
    for (const auto& [name, p] : params) {
        auto rep = ag::grad_check(
            [&](const Tensor& x) {
                auto ps = model::clone_params(params);
                ps[name] = x;
                model::Forward f{&cfg, &ps};
                return model::nll_loss(model::decode_logits(f, model::encode(f, b), b), b);
            },
            p, 1e-5, 1e-3);
        if (!rep.pass) {
            detail = "full-model check failed at " + name +
                     " rel_err=" + std::to_string(rep.max_rel_err);
            return false;
        }
    }
    return true;
}

// ---- criteria 5-8: the training block ------------------------------------

struct SeedOutcome {
    double base = 0, dtn = 0, distill = 0, both = 0;
    bool dominant = false;
    double probe_gap = 0;
    std::vector<double> teacher_own, base_own;
};

constexpr int kBaselineSteps = 800;
constexpr int kTeacherSteps = 800;
constexpr int kUnifiedSteps = 700;
constexpr double kDropout = 0.0;

train::TrainConfig ladder_config(int seed) {
    train::TrainConfig cfg;
    cfg.model.vocab_size_src = cfg.model.vocab_size_tgt =
        data::Vocabulary::build(24, 4).size();
    cfg.model.d_model = 32;
    cfg.model.n_heads = 2;
    cfg.model.n_enc_layers = 1;
    cfg.model.n_dec_layers = 1;
    cfg.model.d_ffn = 64;
    cfg.model.max_len = 24;
    cfg.model.dropout_rate = kDropout;
    cfg.batch_tokens = 800;
    cfg.adam.warmup_steps = 100;
    cfg.seed = static_cast<std::uint64_t>(seed);
    return cfg;
}

SeedOutcome run_seed(int seed, const std::vector<data::DomainCorpus>& train_set,
                     const std::vector<data::DomainCorpus>& test_set) {
    auto cfg = ladder_config(seed);
    SeedOutcome out;

    auto score_one = [&](const model::ModelParams& p, int d, int dtn_domain) {
        eval::DecodeOptions o;
        o.batch_tokens = cfg.batch_tokens;
        o.dtn_domain = dtn_domain;
        eval::Sentences refs;
        for (const auto& pr : test_set[d].pairs) refs.push_back(pr.second);
        return eval::bleu(eval::decode_corpus(cfg.model, p, test_set[d], o), refs);
    };
    auto score_avg = [&](const model::ModelParams& p, bool use_dtn) {
        double avg = 0;
        for (int d = 0; d < 4; ++d) avg += score_one(p, d, use_dtn ? d : -1);
        return avg / 4;
    };

    cfg.max_steps = kBaselineSteps;
    auto base = train::train_baseline(cfg, train_set).params;
    out.base = score_avg(base, false);
    for (int d = 0; d < 4; ++d) out.base_own.push_back(score_one(base, d, -1));

    supervision::TeacherSet teachers;
    for (int d = 0; d < 4; ++d) {
        train::TrainConfig tc = cfg;
        tc.seed = cfg.seed + 100 + d;
        tc.max_steps = kTeacherSteps;
        teachers.teachers[d] = train::finetune_teacher(tc, base, train_set[d]).params;
        out.teacher_own.push_back(score_one(teachers.teachers[d], d, -1));
    }

    auto unified = [&](bool dw, bool disc) {
        train::TrainConfig uc = cfg;
        uc.max_steps = kUnifiedSteps;
        uc.distill_word = dw;
        uc.discriminate = disc;
        return train::train_unified(uc, base, train_set, dw ? &teachers : nullptr)
            .params;
    };
    auto p_dtn = unified(false, false);
    auto p_distill = unified(true, false);
    auto p_both = unified(true, true);
    out.dtn = score_avg(p_dtn, true);
    out.distill = score_avg(p_distill, true);
    out.both = score_avg(p_both, true);

    out.dominant = eval::cross_domain_matrix(cfg.model, p_both, test_set,
                                             cfg.batch_tokens)
                       .all_columns_dominant();
    const double enc = eval::probe_classifier_accuracy(
        cfg.model, p_both, test_set, eval::ProbeSite::encoder_out, 1,
        cfg.batch_tokens);
    const double dtn_acc = eval::probe_classifier_accuracy(
        cfg.model, p_both, test_set, eval::ProbeSite::dtn_out, 1, cfg.batch_tokens);
    out.probe_gap = 100.0 * (dtn_acc - enc);
    return out;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace

int main() {
    // 1. gradient suite under two minutes
    {
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        const bool ok = gradient_suite(detail);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        report(1, ok && secs < 120.0,
               "finite-difference checks for all primitives and the full model",
               ok ? fmt(secs) + "s" : detail);
    }

    // 2. balance-factor sampler distribution
    {
        struct Setting {
            std::vector<double> n;
            double alpha;
        };
        const std::vector<Setting> settings = {
            {{0.59, 0.87, 0.31, 0.53}, 0.7},
            {{4.0, 3.0, 2.0, 1.0}, 1.0},
            {{10.0, 1.0, 1.0, 1.0}, 0.5},
        };
        bool ok = true;
        std::string detail;
        for (std::size_t i = 0; i < settings.size(); ++i) {
            data::SamplerState s(settings[i].n, settings[i].alpha, 1000 + i);
            std::vector<std::uint64_t> counts(settings[i].n.size(), 0);
            for (int k = 0; k < 100000; ++k) ++counts[s.sample()];
            auto r = stats::chi2_goodness_of_fit(counts, s.probabilities(), 0.001);
            if (!r.pass) {
                ok = false;
                detail = "setting " + std::to_string(i) +
                         " rejected, p=" + std::to_string(r.p_value);
            }
        }
        double prev_max = -1.0, prev_min = 2.0;
        for (double alpha : {1.0, 0.7, 0.5, 0.1}) {
            auto q = data::SamplerState({0.59, 0.87, 0.31, 0.53}, alpha, 0)
                         .probabilities();
            const double mx = *std::max_element(q.begin(), q.end());
            const double mn = *std::min_element(q.begin(), q.end());
            if (prev_max > 0 && !(mx < prev_max && mn > prev_min)) {
                ok = false;
                detail = "flattening not monotone at alpha=" + std::to_string(alpha);
            }
            prev_max = mx;
            prev_min = mn;
        }
        report(2, ok, "Eq. 5 sampler chi-square and monotone flattening", detail);
    }

    // 3. distillation-loss identities
    {
        bool ok = true;
        std::string detail;
        auto b = toy_batch(2, 3, 4, 30, 16);
        auto s = randt({2, 4, 16}, 31);
        auto t = randt({2, 4, 16}, 32);
        if (supervision::kd_word_loss(s, t, b, 0.0).item() !=
            model::nll_loss(s, b).item()) {
            ok = false;
            detail = "lambda=0 reduction not bit-exact";
        }
        auto onehot = Tensor::zeros({2, 4, 16});
        for (int r = 0; r < 2; ++r)
            for (int j = 0; j < 4; ++j)
                onehot.data()[(r * 4 + j) * 16 + b.tgt_out[r * 4 + j]] = 1e4;
        const double nll = model::nll_loss(s, b).item();
        for (double lambda : {0.1, 0.5, 1.0})
            if (std::abs(supervision::kd_word_loss(s, onehot, b, lambda).item() -
                         nll) > 1e-9) {
                ok = false;
                detail = "one-hot collapse off at lambda=" + std::to_string(lambda);
            }
        auto z = Tensor::zeros({2, 4, 16});
        if (std::abs(supervision::kd_word_loss(z, z, b, 0.37).item() -
                     std::log(16.0)) > 1e-9) {
            ok = false;
            detail = "uniform/uniform != ln|V|";
        }
        ag::Tape::current().clear();
        report(3, ok, "Eq. 6 identities", detail);
    }

    // 4. residual identity of the untrained DTN bank
    {
        bool ok = true;
        std::string detail;
        model::ModelConfig cfg;
        cfg.vocab_size_src = cfg.vocab_size_tgt = 32;
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.n_enc_layers = 1;
        cfg.n_dec_layers = 1;
        cfg.d_ffn = 24;
        cfg.max_len = 16;
        cfg.dropout_rate = 0.0;
        for (auto kind : {transform::DtnKind::attention, transform::DtnKind::ffn}) {
            auto params = model::init_nmt_params(cfg, 40);
            transform::init_dtn(params, cfg, 4, kind, 40);
            model::Forward f{&cfg, &params};
            auto b = toy_batch(3, 5, 4, 41, 32, 2);
            ag::NoGradGuard ng;
            auto h = model::encode(f, b);
            auto hp = dtn::transform::transform(f, h, b, 2);
            if (std::memcmp(h.data().data(), hp.data().data(),
                            h.size() * sizeof(double)) != 0) {
                ok = false;
                detail = "H' != H bit-exact for kind " + transform::to_string(kind);
            }
        }
        auto vocab = data::Vocabulary::build(24, 4);
        data::GenParams gp;
        gp.seed = 42;
        gp.sizes = {8, 8, 8, 8};
        gp.min_len = 3;
        gp.max_len = 6;
        auto tests = data::generate_synthetic(vocab, gp);
        auto params = model::init_nmt_params(cfg, 43);
        transform::init_dtn(params, cfg, 4, transform::DtnKind::attention, 43);
        auto m = eval::cross_domain_matrix(cfg, params, tests, 256);
        for (int j = 0; j < m.n && ok; ++j)
            for (int i = 1; i < m.n; ++i)
                if (m.at(i, j) != m.at(0, j)) {
                    ok = false;
                    detail = "untrained matrix column " + std::to_string(j) +
                             " not constant";
                }
        report(4, ok, "zero-initialized DTN is the identity", detail);
    }

    // 5-8. training block over five seeds
    {
        auto vocab = data::Vocabulary::build(24, 4);
        data::GenParams gp;
        gp.seed = 400;
        gp.sizes = {1200, 1200, 300, 300};
        gp.min_len = 3;
        gp.max_len = 10;
        auto train_set = data::generate_synthetic(vocab, gp);
        data::GenParams tp = gp;
        tp.source_seed = 401;
        tp.sizes = {150, 150, 150, 150};
        auto test_set = data::generate_synthetic(vocab, tp);

        std::vector<SeedOutcome> outcomes;
        std::vector<double> vb, v1, v2, v3, gaps;
        int dominant_count = 0;
        for (int seed = 1; seed <= 5; ++seed) {
            auto o = run_seed(seed, train_set, test_set);
            std::printf("  [seed %d] base %.2f  dtn %.2f  distill %.2f  both %.2f"
                        "  dominant %s  probe_gap %.1f\n",
                        seed, o.base, o.dtn, o.distill, o.both,
                        o.dominant ? "yes" : "no", o.probe_gap);
            std::fflush(stdout);
            outcomes.push_back(o);
            vb.push_back(o.base);
            v1.push_back(o.dtn);
            v2.push_back(o.distill);
            v3.push_back(o.both);
            gaps.push_back(o.probe_gap);
            if (o.dominant) ++dominant_count;
        }
        const double mb = median(vb), m1 = median(v1), m2 = median(v2),
                     m3 = median(v3);
        const bool ladder = mb <= m1 && m1 <= m2 && m2 <= m3 && m3 >= mb + 3.0;
        report(5, ladder, "ablation ladder of 5-seed medians",
               "baseline " + fmt(mb) + " <= dtn " + fmt(m1) + " <= +distill " +
                   fmt(m2) + " <= +discriminate " + fmt(m3));

        report(6, dominant_count >= 4,
               "cross-domain matrix diagonal dominance",
               std::to_string(dominant_count) + "/5 seeds dominant");

        const double mg = median(gaps);
        report(7, mg >= 10.0, "probe-accuracy gap dtn_out vs encoder_out",
               "median gap " + fmt(mg) + " points");

        const auto& first = outcomes.front();
        int beat = 0;
        for (int d = 0; d < 4; ++d)
            if (first.teacher_own[d] > first.base_own[d]) ++beat;
        report(8, beat >= 3, "teachers beat the baseline on their own domain",
               std::to_string(beat) + "/4 domains");
    }

    // 9. two-phase freeze contract over 200 steps
    {
        auto vocab = data::Vocabulary::build(24, 4);
        data::GenParams gp;
        gp.seed = 90;
        gp.sizes = {40, 40, 20, 20};
        gp.min_len = 3;
        gp.max_len = 8;
        auto corpora = data::generate_synthetic(vocab, gp);

        train::TrainConfig cfg;
        cfg.model.vocab_size_src = cfg.model.vocab_size_tgt = vocab.size();
        cfg.model.d_model = 16;
        cfg.model.n_heads = 2;
        cfg.model.n_enc_layers = 1;
        cfg.model.n_dec_layers = 1;
        cfg.model.d_ffn = 24;
        cfg.model.max_len = 16;
        cfg.model.dropout_rate = 0.1;
        cfg.batch_tokens = 300;
        cfg.adam.warmup_steps = 50;
        cfg.discriminate = true;
        cfg.seed = 9;
        cfg.max_steps = 200;

        auto params = model::init_nmt_params(cfg.model, 9);
        transform::init_dtn(params, cfg.model, 4, cfg.dtn_kind, cfg.seed);
        supervision::init_classifiers(params, cfg.model, 4, cfg.seed);
        train::TrainState st(cfg);

        model::ModelParams snapshot = model::clone_params(params);
        int violations = 0, checked = 0;
        auto observer = [&](char phase, const model::ModelParams& p) {
            for (const auto& [name, t] : p) {
                const bool is_adv = name.rfind("adv.", 0) == 0;
                if ((phase == 'A') != is_adv) continue;
                if (std::memcmp(t.data().data(), snapshot.at(name).data().data(),
                                t.size() * sizeof(double)) != 0)
                    ++violations;
            }
            snapshot = model::clone_params(p);
            ++checked;
        };
        train::unified_steps(cfg, corpora, nullptr, params, st, cfg.max_steps,
                             observer);
        report(9, violations == 0 && checked == 400,
               "phase freeze bit-identity over a 200-step run",
               std::to_string(checked) + " phase steps checked, " +
                   std::to_string(violations) + " violations");
    }

    // 10. reproducibility of checkpoints and reports
    {
        auto vocab = data::Vocabulary::build(24, 4);
        data::GenParams gp;
        gp.seed = 91;
        gp.sizes = {40, 40, 20, 20};
        gp.min_len = 3;
        gp.max_len = 8;
        auto corpora = data::generate_synthetic(vocab, gp);
        data::GenParams tp = gp;
        tp.source_seed = 92;
        tp.sizes = {15, 15, 15, 15};
        auto tests = data::generate_synthetic(vocab, tp);

        train::TrainConfig cfg;
        cfg.model.vocab_size_src = cfg.model.vocab_size_tgt = vocab.size();
        cfg.model.d_model = 16;
        cfg.model.n_heads = 2;
        cfg.model.n_enc_layers = 1;
        cfg.model.n_dec_layers = 1;
        cfg.model.d_ffn = 24;
        cfg.model.max_len = 16;
        cfg.model.dropout_rate = 0.1;
        cfg.batch_tokens = 300;
        cfg.adam.warmup_steps = 50;
        cfg.discriminate = true;
        cfg.seed = 10;
        cfg.max_steps = 40;

        auto base = model::init_nmt_params(cfg.model, 10);
        std::string hashes[2], reports[2];
        for (int run = 0; run < 2; ++run) {
            auto res = train::train_unified(cfg, base, corpora, nullptr);
            const std::string path =
                "acc_repro_" + std::to_string(run) + ".json";
            ckpt::save_checkpoint(path, cfg.model, res.params);
            hashes[run] = ckpt::checkpoint_hash(path);
            std::vector<double> scores;
            for (int d = 0; d < 4; ++d) {
                eval::DecodeOptions o;
                o.batch_tokens = 300;
                o.dtn_domain = d;
                eval::Sentences refs;
                for (const auto& pr : tests[d].pairs) refs.push_back(pr.second);
                scores.push_back(eval::bleu(
                    eval::decode_corpus(cfg.model, res.params, tests[d], o), refs));
            }
            auto rep = eval::make_report({"d0", "d1", "d2", "d3"}, scores);
            rep.checkpoint_hash = hashes[run];
            reports[run] = rep.to_csv();
            std::remove(path.c_str());
        }
        const bool ok = hashes[0] == hashes[1] && reports[0] == reports[1];
        report(10, ok, "identical (config, seed) reproduce hashes and reports",
               ok ? "hash " + hashes[0] : "mismatch");
    }

    std::printf("%s: %d/10 criteria passed\n", failures == 0 ? "SUCCESS" : "FAILURE",
                10 - failures);
    return failures;
}
