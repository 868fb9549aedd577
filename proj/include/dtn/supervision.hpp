#pragma once

#include <map>
#include <optional>

#include "dtn/domain_transform.hpp"
#include "dtn/model.hpp"

// The two supervision signals: distillation against frozen per-domain
// teachers, and the adversarial / specific domain classifier pair with
// attention pooling, plus the combined objective used by unified training.
namespace dtn::supervision {

// frozen fine-tuned teachers, one per domain
struct TeacherSet {
    std::map<int, model::ModelParams> teachers;
    double lambda = 0.1;

    const model::ModelParams& teacher_for(int domain) const;
};

// adds the pooled softmax classifiers: adv.{query,w} (the adversarial set,
// at the DTN input) and cls.{query,w} (the specific set, at the DTN output)
void init_classifiers(model::ModelParams& params, const model::ModelConfig& cfg,
                      int n_domains, std::uint64_t seed);

// weighted pooling over unmasked positions; query is a trainable vector
ag::Tensor attention_pool(const ag::Tensor& h, const data::Batch& b,
                          const ag::Tensor& query);

// softmax(W^T pooled): probability over domains, one row per sentence
ag::Tensor classify_domain(const ag::Tensor& pooled, const ag::Tensor& weights);

// plain-value Shannon entropy (natural log, 0 log 0 := 0)
double entropy(const std::vector<double>& p);

// differentiable mean entropy of softmax(logits) rows
ag::Tensor mean_entropy_rows(const ag::Tensor& logits);

// (1-lambda) * NLL + lambda * CE(student || teacher softmax), masked mean
ag::Tensor kd_word_loss(const ag::Tensor& student_logits,
                        const ag::Tensor& teacher_logits, const data::Batch& b,
                        double lambda);

struct SeqDistillResult {
    data::DomainCorpus corpus;
    int kept_gold = 0;  // teacher emitted an empty sequence, gold retained
};

// replaces gold targets with the teacher's greedy decodes
SeqDistillResult kd_sequence_targets(const model::ModelConfig& cfg,
                                     const model::ModelParams& teacher,
                                     const data::DomainCorpus& corpus,
                                     int batch_tokens);

struct SupervisionFlags {
    bool distill_word = false;
    bool discriminate = false;
};

struct LossReport {
    double nll_or_kd = 0.0;
    double specific_cls = 0.0;
    double adv_entropy = 0.0;
    double adv_cls = 0.0;
};

struct UnifiedLosses {
    ag::Tensor nll_or_kd;
    ag::Tensor specific_cls;  // undefined unless discriminate
    ag::Tensor adv_entropy;
    ag::Tensor adv_cls;
    ag::Tensor phase_a_total;

    LossReport report() const;
};

// Builds all loss components for one domain batch. teacher_logits, when
// given, must be detached values from the frozen teacher. delta weighs the
// entropy term; the entropy component is negated so that minimizing it
// maximizes classifier confusion.
UnifiedLosses unified_objective(const model::Forward& f, const data::Batch& b,
                                const SupervisionFlags& flags,
                                const ag::Tensor* teacher_logits, double lambda,
                                double delta);

}  // namespace dtn::supervision
