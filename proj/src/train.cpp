#include "dtn/train.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace dtn::train {

using ag::Tensor;
using nlohmann::json;

void TrainConfig::validate() const {
    model.validate();
    std::vector<std::string> errs;
    if (max_steps < 0) errs.push_back("max_steps must be >= 0");
    if (batch_tokens < 1) errs.push_back("batch_tokens must be >= 1");
    if (lambda < 0.0 || lambda > 1.0) errs.push_back("lambda must be in [0,1]");
    if (delta < 0.0) errs.push_back("delta must be >= 0");
    if (alpha <= 0.0) errs.push_back("alpha must be > 0");
    if (phase_b_per_a < 1) errs.push_back("phase_b_per_a must be >= 1");
    if (adam.warmup_steps < 1) errs.push_back("adam.warmup_steps must be >= 1");
    if (adam.lr_scale <= 0.0) errs.push_back("adam.lr_scale must be > 0");
    if (!errs.empty()) {
        std::string msg = "invalid training config:";
        for (const auto& e : errs) msg += "\n  - " + e;
        throw std::invalid_argument(msg);
    }
}

std::string config_to_json(const TrainConfig& c) {
    json j;
    j["model"] = {{"vocab_size_src", c.model.vocab_size_src},
                  {"vocab_size_tgt", c.model.vocab_size_tgt},
                  {"d_model", c.model.d_model},
                  {"n_heads", c.model.n_heads},
                  {"n_enc_layers", c.model.n_enc_layers},
                  {"n_dec_layers", c.model.n_dec_layers},
                  {"d_ffn", c.model.d_ffn},
                  {"max_len", c.model.max_len},
                  {"dropout_rate", c.model.dropout_rate},
                  {"pad_id", c.model.pad_id},
                  {"bos_id", c.model.bos_id},
                  {"eos_id", c.model.eos_id}};
    j["adam"] = {{"lr_scale", c.adam.lr_scale},
                 {"warmup_steps", c.adam.warmup_steps},
                 {"beta1", c.adam.beta1},
                 {"beta2", c.adam.beta2},
                 {"eps", c.adam.eps}};
    j["max_steps"] = c.max_steps;
    j["batch_tokens"] = c.batch_tokens;
    j["lambda"] = c.lambda;
    j["delta"] = c.delta;
    j["alpha"] = c.alpha;
    j["seed"] = c.seed;
    j["distill_word"] = c.distill_word;
    j["distill_seq"] = c.distill_seq;
    j["discriminate"] = c.discriminate;
    j["phase_b_per_a"] = c.phase_b_per_a;
    j["dtn_kind"] = transform::to_string(c.dtn_kind);
    j["log_path"] = c.log_path;
    return j.dump(2);
}

TrainConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("malformed config: ") + e.what());
    }
    TrainConfig c;
    auto get = [](const json& o, const char* key, auto& dst) {
        if (o.contains(key)) o.at(key).get_to(dst);
    };
    if (j.contains("model")) {
        const json& m = j["model"];
        get(m, "vocab_size_src", c.model.vocab_size_src);
        get(m, "vocab_size_tgt", c.model.vocab_size_tgt);
        get(m, "d_model", c.model.d_model);
        get(m, "n_heads", c.model.n_heads);
        get(m, "n_enc_layers", c.model.n_enc_layers);
        get(m, "n_dec_layers", c.model.n_dec_layers);
        get(m, "d_ffn", c.model.d_ffn);
        get(m, "max_len", c.model.max_len);
        get(m, "dropout_rate", c.model.dropout_rate);
        get(m, "pad_id", c.model.pad_id);
        get(m, "bos_id", c.model.bos_id);
        get(m, "eos_id", c.model.eos_id);
    }
    if (j.contains("adam")) {
        const json& a = j["adam"];
        get(a, "lr_scale", c.adam.lr_scale);
        get(a, "warmup_steps", c.adam.warmup_steps);
        get(a, "beta1", c.adam.beta1);
        get(a, "beta2", c.adam.beta2);
        get(a, "eps", c.adam.eps);
    }
    get(j, "max_steps", c.max_steps);
    get(j, "batch_tokens", c.batch_tokens);
    get(j, "lambda", c.lambda);
    get(j, "delta", c.delta);
    get(j, "alpha", c.alpha);
    get(j, "seed", c.seed);
    get(j, "distill_word", c.distill_word);
    get(j, "distill_seq", c.distill_seq);
    get(j, "discriminate", c.discriminate);
    get(j, "phase_b_per_a", c.phase_b_per_a);
    if (j.contains("dtn_kind"))
        c.dtn_kind = transform::kind_from_string(j["dtn_kind"].get<std::string>());
    get(j, "log_path", c.log_path);
    return c;
}

void apply_override(TrainConfig& c, const std::string& key, const std::string& value) {
    auto as_int = [&] { return std::stoi(value); };
    auto as_double = [&] { return std::stod(value); };
    auto as_bool = [&] {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        throw std::invalid_argument("override " + key + ": '" + value +
                                    "' is not a boolean");
    };
    if (key == "model.vocab_size_src") c.model.vocab_size_src = as_int();
    else if (key == "model.vocab_size_tgt") c.model.vocab_size_tgt = as_int();
    else if (key == "model.d_model") c.model.d_model = as_int();
    else if (key == "model.n_heads") c.model.n_heads = as_int();
    else if (key == "model.n_enc_layers") c.model.n_enc_layers = as_int();
    else if (key == "model.n_dec_layers") c.model.n_dec_layers = as_int();
    else if (key == "model.d_ffn") c.model.d_ffn = as_int();
    else if (key == "model.max_len") c.model.max_len = as_int();
    else if (key == "model.dropout_rate") c.model.dropout_rate = as_double();
    else if (key == "adam.lr_scale") c.adam.lr_scale = as_double();
    else if (key == "adam.warmup_steps") c.adam.warmup_steps = as_int();
    else if (key == "adam.beta1") c.adam.beta1 = as_double();
    else if (key == "adam.beta2") c.adam.beta2 = as_double();
    else if (key == "adam.eps") c.adam.eps = as_double();
    else if (key == "max_steps") c.max_steps = as_int();
    else if (key == "batch_tokens") c.batch_tokens = as_int();
    else if (key == "lambda") c.lambda = as_double();
    else if (key == "delta") c.delta = as_double();
    else if (key == "alpha") c.alpha = as_double();
    else if (key == "seed") c.seed = std::stoull(value);
    else if (key == "distill_word") c.distill_word = as_bool();
    else if (key == "distill_seq") c.distill_seq = as_bool();
    else if (key == "discriminate") c.discriminate = as_bool();
    else if (key == "phase_b_per_a") c.phase_b_per_a = as_int();
    else if (key == "dtn_kind") c.dtn_kind = transform::kind_from_string(value);
    else if (key == "log_path") c.log_path = value;
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

void write_training_log(const std::vector<LogRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write training log " + path);
    out << "step,phase,domain,nll_or_kd,specific_cls,adv_entropy,adv_cls\n";
    out.precision(17);
    for (const auto& r : rows)
        out << r.step << "," << r.phase << "," << r.domain << "," << r.nll_or_kd
            << "," << r.specific_cls << "," << r.adv_entropy << "," << r.adv_cls
            << "\n";
    if (!out) throw std::runtime_error("write failure on training log " + path);
}

TrainState::TrainState(const TrainConfig& cfg)
    : adam([&] {
          optim::AdamConfig a = cfg.adam;
          a.d_model = cfg.model.d_model;
          return a;
      }()),
      rng(cfg.seed),
      rng_b(cfg.seed ^ 0x9e3779b97f4a7c15ULL) {}

std::string TrainState::serialize() const {
    json j;
    j["step"] = step;
    j["adam_t"] = adam.t_;
    j["adam_m"] = adam.m_;
    j["adam_v"] = adam.v_;
    std::ostringstream rs;
    rs << rng;
    j["rng"] = rs.str();
    std::ostringstream rbs;
    rbs << rng_b;
    j["rng_b"] = rbs.str();
    j["loss_ema"] = loss_ema;
    return j.dump();
}

void TrainState::restore(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("malformed train state: ") + e.what());
    }
    j.at("step").get_to(step);
    j.at("adam_t").get_to(adam.t_);
    j.at("adam_m").get_to(adam.m_);
    j.at("adam_v").get_to(adam.v_);
    std::istringstream rs(j.at("rng").get<std::string>());
    rs >> rng;
    std::istringstream rbs(j.at("rng_b").get<std::string>());
    rbs >> rng_b;
    j.at("loss_ema").get_to(loss_ema);
}

namespace {

void check_finite(double loss, int step) {
    if (!std::isfinite(loss))
        throw std::runtime_error("training diverged at step " + std::to_string(step) +
                                 " (loss=" + std::to_string(loss) + ")");
}

void track_ema(TrainState& st, double loss) {
    st.loss_ema = st.step == 1 ? loss : 0.98 * st.loss_ema + 0.02 * loss;
}

std::size_t pick_index(std::mt19937_64& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace

void baseline_steps(const TrainConfig& cfg,
                    const std::vector<data::DomainCorpus>& corpora,
                    model::ModelParams& params, TrainState& st, int until_step) {
    cfg.validate();
    if (corpora.empty())
        throw std::invalid_argument("baseline training needs at least one corpus");
    data::DomainCorpus merged;
    merged.domain = -1;
    for (const auto& c : corpora)
        merged.pairs.insert(merged.pairs.end(), c.pairs.begin(), c.pairs.end());
    if (merged.pairs.empty())
        throw std::invalid_argument("baseline training corpus is empty");
    auto batches = data::make_batches(merged, cfg.batch_tokens, cfg.model.pad_id,
                                      cfg.model.bos_id, cfg.model.eos_id);
    model::Forward f{&cfg.model, &params, true, &st.rng};
    while (st.step < until_step) {
        const auto& b = batches[pick_index(st.rng, batches.size())];
        model::zero_grads(params);
        Tensor loss = model::nll_loss(
            model::decode_logits(f, model::encode(f, b), b), b);
        const double v = loss.item();
        check_finite(v, st.step + 1);
        ag::backward(loss);
        st.adam.step(params);
        ++st.step;
        track_ema(st, v);
        st.log.push_back({st.step, 'A', -1, v, 0.0, 0.0, 0.0});
    }
}

TrainResult train_baseline(const TrainConfig& cfg,
                           const std::vector<data::DomainCorpus>& corpora) {
    TrainResult res;
    res.params = model::init_nmt_params(cfg.model, cfg.seed);
    TrainState st(cfg);
    baseline_steps(cfg, corpora, res.params, st, cfg.max_steps);
    res.log = std::move(st.log);
    if (!cfg.log_path.empty()) write_training_log(res.log, cfg.log_path);
    return res;
}

TrainResult finetune_teacher(const TrainConfig& cfg, const model::ModelParams& base,
                             const data::DomainCorpus& corpus) {
    if (corpus.pairs.empty())
        throw std::invalid_argument("finetune_teacher: domain corpus is empty");
    TrainResult res;
    res.params = model::clone_params(base);
    TrainState st(cfg);
    baseline_steps(cfg, {corpus}, res.params, st, cfg.max_steps);
    res.log = std::move(st.log);
    if (!cfg.log_path.empty()) write_training_log(res.log, cfg.log_path);
    return res;
}

TrainResult train_domain_control(const TrainConfig& cfg,
                                 const std::vector<data::DomainCorpus>& corpora,
                                 const data::Vocabulary& vocab) {
    if (vocab.n_tags < static_cast<int>(corpora.size()))
        throw std::invalid_argument("domain control: vocabulary has " +
                                    std::to_string(vocab.n_tags) + " tags for " +
                                    std::to_string(corpora.size()) + " domains");
    std::vector<data::DomainCorpus> tagged = corpora;
    for (auto& c : tagged)
        for (auto& [src, tgt] : c.pairs)
            src.insert(src.begin(), vocab.domain_tag(c.domain));
    return train_baseline(cfg, tagged);
}

void unified_steps(const TrainConfig& cfg,
                   const std::vector<data::DomainCorpus>& corpora,
                   const supervision::TeacherSet* teachers,
                   model::ModelParams& params, TrainState& st, int until_step,
                   const std::function<void(char, const model::ModelParams&)>&
                       on_phase_step) {
    cfg.validate();
    const int n = static_cast<int>(corpora.size());
    if (n < 1) throw std::invalid_argument("unified training needs >= 1 domain");
    if (transform::dtn_domains(params) != n)
        throw std::invalid_argument(
            "unified training: " + std::to_string(transform::dtn_domains(params)) +
            " DTN domains but " + std::to_string(n) + " corpora");
    if (cfg.distill_word && !teachers)
        throw std::invalid_argument("word distillation requested without teachers");

    std::vector<std::vector<data::Batch>> batches(n);
    std::vector<double> counts(n);
    for (int d = 0; d < n; ++d) {
        batches[d] = data::make_batches(corpora[d], cfg.batch_tokens, cfg.model.pad_id,
                                        cfg.model.bos_id, cfg.model.eos_id);
        if (batches[d].empty())
            throw std::invalid_argument("unified training: domain " +
                                        std::to_string(d) + " corpus is empty");
        counts[d] = static_cast<double>(batches[d].size());
    }
    // Eq. 5 probabilities are fixed for the run since batch counts are fixed
    const auto q = data::SamplerState(counts, cfg.alpha, 0).probabilities();
    auto sample_domain = [&](std::mt19937_64& rng) {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        double acc = 0.0;
        for (int d = 0; d < n; ++d) {
            acc += q[d];
            if (u < acc) return d;
        }
        return n - 1;
    };

    std::map<std::pair<int, std::size_t>, Tensor> teacher_cache;
    auto teacher_logits = [&](int d, std::size_t bi) -> const Tensor& {
        auto key = std::make_pair(d, bi);
        auto it = teacher_cache.find(key);
        if (it != teacher_cache.end()) return it->second;
        ag::NoGradGuard ng;
        const auto& tparams = teachers->teacher_for(d);
        model::Forward tf{&cfg.model, &tparams};
        const auto& b = batches[d][bi];
        Tensor logits = model::decode_logits(tf, model::encode(tf, b), b);
        return teacher_cache.emplace(key, ag::detach(logits)).first->second;
    };

    supervision::SupervisionFlags flags;
    flags.distill_word = cfg.distill_word;
    flags.discriminate = cfg.discriminate;
    model::Forward f{&cfg.model, &params, true, &st.rng};
    const auto is_adv = [](const std::string& name) {
        return name.rfind("adv.", 0) == 0;
    };

    while (st.step < until_step) {
        // Phase A: update {theta (incl. DTN bank), gamma}, psi frozen
        const int d = sample_domain(st.rng);
        const std::size_t bi = pick_index(st.rng, batches[d].size());
        const auto& b = batches[d][bi];
        const Tensor* tl = cfg.distill_word ? &teacher_logits(d, bi) : nullptr;
        model::zero_grads(params);
        auto losses =
            supervision::unified_objective(f, b, flags, tl, cfg.lambda, cfg.delta);
        auto rep = losses.report();
        const double v = losses.phase_a_total.item();
        check_finite(v, st.step + 1);
        ag::backward(losses.phase_a_total);
        st.adam.step(params, [&](const std::string& name) { return !is_adv(name); });
        ++st.step;
        track_ema(st, v);
        st.log.push_back({st.step, 'A', d, rep.nll_or_kd, rep.specific_cls,
                          rep.adv_entropy, rep.adv_cls});
        if (on_phase_step) on_phase_step('A', params);

        if (!cfg.discriminate) continue;
        // Phase B: update psi only on detached encoder output
        for (int k = 0; k < cfg.phase_b_per_a; ++k) {
            const int db = sample_domain(st.rng_b);
            const auto& bb = batches[db][pick_index(st.rng_b, batches[db].size())];
            Tensor h;
            {
                ag::NoGradGuard ng;
                model::Forward frozen{&cfg.model, &params};
                h = ag::detach(model::encode(frozen, bb));
            }
            model::zero_grads(params);
            Tensor pooled = supervision::attention_pool(h, bb, params.at("adv.query"));
            Tensor lp = ag::log_softmax_last(ag::linear(pooled, params.at("adv.w")));
            std::vector<int> labels(bb.rows, bb.domain);
            Tensor loss = ag::scale(ag::sum_all(ag::gather_last(lp, labels)),
                                    -1.0 / bb.rows);
            const double bv = loss.item();
            check_finite(bv, st.step);
            ag::backward(loss);
            st.adam.step(params, is_adv);
            st.log.push_back({st.step, 'B', db, 0.0, 0.0, 0.0, bv});
            if (on_phase_step) on_phase_step('B', params);
        }
    }
}

TrainResult train_unified(const TrainConfig& cfg, const model::ModelParams& base,
                          const std::vector<data::DomainCorpus>& corpora,
                          const supervision::TeacherSet* teachers) {
    cfg.validate();
    const int n = static_cast<int>(corpora.size());
    if ((cfg.distill_word || cfg.distill_seq) && !teachers)
        throw std::invalid_argument("distillation requested without teachers");
    if (teachers && (cfg.distill_word || cfg.distill_seq))
        for (int d = 0; d < n; ++d) teachers->teacher_for(d);  // throws if missing

    TrainResult res;
    res.params = model::clone_params(base);
    transform::init_dtn(res.params, cfg.model, n, cfg.dtn_kind, cfg.seed);
    if (cfg.discriminate)
        supervision::init_classifiers(res.params, cfg.model, n, cfg.seed);

    std::vector<data::DomainCorpus> work = corpora;
    if (cfg.distill_seq)
        for (int d = 0; d < n; ++d)
            work[d] = supervision::kd_sequence_targets(cfg.model,
                                                       teachers->teacher_for(d),
                                                       corpora[d], cfg.batch_tokens)
                          .corpus;

    TrainState st(cfg);
    unified_steps(cfg, work, teachers, res.params, st, cfg.max_steps);
    res.log = std::move(st.log);
    if (!cfg.log_path.empty()) write_training_log(res.log, cfg.log_path);
    return res;
}

}  // namespace dtn::train
