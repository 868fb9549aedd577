#include "dtn/supervision.hpp"

#include <cmath>
#include <stdexcept>

#include "dtn/stats.hpp"

namespace dtn::supervision {

using namespace ag;
using model::Forward;
using model::ModelParams;

const ModelParams& TeacherSet::teacher_for(int domain) const {
    auto it = teachers.find(domain);
    if (it == teachers.end())
        throw std::invalid_argument("no teacher for domain " + std::to_string(domain));
    return it->second;
}

void init_classifiers(model::ModelParams& params, const model::ModelConfig& cfg,
                      int n_domains, std::uint64_t seed) {
    if (n_domains < 1)
        throw std::invalid_argument("init_classifiers: n_domains must be >= 1");
    const int d = cfg.d_model;
    // the two pooling queries are deliberately separate parameter sets
    for (const std::string pre : {"adv", "cls"}) {
        std::mt19937_64 rq(seed ^ stats::fnv1a(pre.data(), pre.size()));
        params[pre + ".query"] = model::xavier_init({d}, rq);
        params[pre + ".w"] = model::xavier_init({d, n_domains}, rq);
    }
}

Tensor attention_pool(const Tensor& h, const data::Batch& b, const Tensor& query) {
    const Shape& s = h.shape();
    if (s.size() != 3)
        throw std::invalid_argument("attention_pool: expected [batch, len, d], got " +
                                    shape_str(s));
    const int rows = s[0], t = s[1], d = s[2];
    if (query.shape() != Shape{d})
        throw std::invalid_argument("attention_pool: query " + shape_str(query.shape()) +
                                    " does not match d_model " + std::to_string(d));
    for (int r = 0; r < rows; ++r) {
        bool any = false;
        for (int j = 0; j < t; ++j) any = any || b.src_mask[r * t + j] != 0.0;
        if (!any)
            throw std::invalid_argument("attention_pool: fully masked row " +
                                        std::to_string(r));
    }
    Tensor scores = reshape(linear(h, reshape(query, {d, 1})), {rows, t});
    scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor mask = Tensor::from({rows, t}, b.src_mask);
    Tensor alpha = softmax_last(masked_fill(scores, mask, -1e9));
    return reshape(bmm(reshape(alpha, {rows, 1, t}), h), {rows, d});
}

Tensor classify_domain(const Tensor& pooled, const Tensor& weights) {
    return softmax_last(linear(pooled, weights));
}

double entropy(const std::vector<double>& p) {
    double sum = 0.0;
    for (double x : p) {
        if (x < 0.0) throw std::invalid_argument("entropy: negative probability");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("entropy: probabilities sum to " +
                                    std::to_string(sum));
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

Tensor mean_entropy_rows(const Tensor& logits) {
    Tensor p = softmax_last(logits);
    Tensor lp = log_softmax_last(logits);
    Tensor row_h = scale(sum_last(mul(p, lp)), -1.0);
    return mean_all(row_h);
}

namespace {

// mean NLL of pooled classifier logits against one shared domain label
Tensor domain_nll(const Tensor& logits, int domain) {
    const int rows = logits.shape()[0];
    std::vector<int> labels(rows, domain);
    return scale(sum_all(gather_last(log_softmax_last(logits), labels)),
                 -1.0 / rows);
}

}  // namespace

Tensor kd_word_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                    const data::Batch& b, double lambda) {
    if (lambda < 0.0 || lambda > 1.0)
        throw std::invalid_argument("kd_word_loss: lambda " + std::to_string(lambda) +
                                    " outside [0,1]");
    if (teacher_logits.shape() != student_logits.shape())
        throw std::invalid_argument("kd_word_loss: teacher logits " +
                                    shape_str(teacher_logits.shape()) +
                                    " do not match student " +
                                    shape_str(student_logits.shape()));
    Tensor nll = model::nll_loss(student_logits, b);
    if (lambda == 0.0) return nll;

    // soft-target cross-entropy over the full vocabulary
    Tensor teacher_probs;
    {
        NoGradGuard ng;
        teacher_probs = softmax_last(teacher_logits);
    }
    double count = 0.0;
    for (double m : b.tgt_mask) count += m != 0.0 ? 1.0 : 0.0;
    Tensor ce_rows = scale(sum_last(mul(log_softmax_last(student_logits),
                                        teacher_probs)),
                           -1.0);  // [rows, tgt_len]
    Tensor mask = Tensor::from({b.rows, b.tgt_len}, b.tgt_mask);
    Tensor ce = scale(sum_all(mul(ce_rows, mask)), 1.0 / count);
    return add(scale(nll, 1.0 - lambda), scale(ce, lambda));
}

SeqDistillResult kd_sequence_targets(const model::ModelConfig& cfg,
                                     const model::ModelParams& teacher,
                                     const data::DomainCorpus& corpus,
                                     int batch_tokens) {
    SeqDistillResult res;
    res.corpus.domain = corpus.domain;
    res.corpus.rule_name = corpus.rule_name;
    res.corpus.pairs.resize(corpus.pairs.size());

    NoGradGuard ng;
    Forward f{&cfg, &teacher, false, nullptr};
    for (const auto& batch :
         data::make_batches(corpus, batch_tokens, cfg.pad_id, cfg.bos_id, cfg.eos_id)) {
        Tensor memory = model::encode(f, batch);
        // leave room for the EOS appended when the result is re-batched
        auto decoded = model::greedy_decode(f, memory, batch, cfg.max_len - 1);
        for (int r = 0; r < batch.rows; ++r) {
            const std::size_t idx = batch.origin[r];
            const auto& gold = corpus.pairs[idx];
            if (decoded[r].empty()) {
                res.corpus.pairs[idx] = gold;
                ++res.kept_gold;
            } else {
                res.corpus.pairs[idx] = {gold.first, decoded[r]};
            }
        }
    }
    return res;
}

LossReport UnifiedLosses::report() const {
    LossReport r;
    r.nll_or_kd = nll_or_kd.defined() ? nll_or_kd.item() : 0.0;
    r.specific_cls = specific_cls.defined() ? specific_cls.item() : 0.0;
    r.adv_entropy = adv_entropy.defined() ? adv_entropy.item() : 0.0;
    r.adv_cls = adv_cls.defined() ? adv_cls.item() : 0.0;
    return r;
}

UnifiedLosses unified_objective(const Forward& f, const data::Batch& b,
                                const SupervisionFlags& flags,
                                const Tensor* teacher_logits, double lambda,
                                double delta) {
    if (flags.distill_word && !teacher_logits)
        throw std::invalid_argument("unified_objective: distillation requested but no "
                                    "teacher logits given");
    UnifiedLosses out;
    Tensor h = model::encode(f, b);
    Tensor memory = transform::has_dtn(*f.params)
                        ? transform::transform(f, h, b, b.domain)
                        : h;
    Tensor logits = model::decode_logits(f, memory, b);
    out.nll_or_kd = flags.distill_word
                        ? kd_word_loss(logits, *teacher_logits, b, lambda)
                        : model::nll_loss(logits, b);
    if (flags.discriminate) {
        const auto& p = *f.params;
        if (!p.count("adv.query") || !p.count("cls.query"))
            throw std::invalid_argument("unified_objective: discrimination requested "
                                        "but classifiers are not initialized");
        Tensor adv_logits = linear(attention_pool(h, b, p.at("adv.query")), p.at("adv.w"));
        out.adv_cls = domain_nll(adv_logits, b.domain);
        out.adv_entropy = scale(mean_entropy_rows(adv_logits), -delta);
        Tensor cls_logits =
            linear(attention_pool(memory, b, p.at("cls.query")), p.at("cls.w"));
        out.specific_cls = domain_nll(cls_logits, b.domain);
        out.phase_a_total =
            add(add(out.nll_or_kd, out.specific_cls), out.adv_entropy);
    } else {
        out.phase_a_total = out.nll_or_kd;
    }
    return out;
}

}  // namespace dtn::supervision
