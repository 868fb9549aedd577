#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dtn/domain_transform.hpp"
#include "dtn/model.hpp"
#include "dtn/optim.hpp"
#include "dtn/supervision.hpp"

// Training recipes: mixed-domain baseline, per-domain fine-tuned teachers,
// the domain-control baseline, and unified DTN training with balance-factor
// domain sampling and the two-phase adversarial schedule.
namespace dtn::train {

struct TrainConfig {
    model::ModelConfig model;
    optim::AdamConfig adam;
    int max_steps = 2000;
    int batch_tokens = 1000;
    double lambda = 0.1;  // word-distillation interpolation
    double delta = 0.1;   // entropy weight
    double alpha = 0.7;   // balance factor
    std::uint64_t seed = 1;
    bool distill_word = false;
    bool distill_seq = false;
    bool discriminate = false;
    int phase_b_per_a = 1;  // Phase B steps after each Phase A step
    transform::DtnKind dtn_kind = transform::DtnKind::attention;
    std::string log_path;  // CSV training log written here when nonempty

    void validate() const;
};

std::string config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const std::string& text);
// dotted keys, e.g. "model.d_model" or "distill_word"; throws on unknown keys
void apply_override(TrainConfig& cfg, const std::string& key,
                    const std::string& value);

struct LogRow {
    int step = 0;
    char phase = 'A';
    int domain = -1;  // -1 for mixed-domain batches
    double nll_or_kd = 0.0;
    double specific_cls = 0.0;
    double adv_entropy = 0.0;
    double adv_cls = 0.0;
};

void write_training_log(const std::vector<LogRow>& rows, const std::string& path);

// Resumable run state: serializing it plus the parameters and continuing
// reproduces the uninterrupted run bit-exactly.
struct TrainState {
    int step = 0;
    optim::Adam adam;
    std::mt19937_64 rng;
    // Phase B draws from its own stream so that enabling discrimination
    // leaves the Phase A batch and dropout sequence unchanged; ablation
    // comparisons then differ only through the losses
    std::mt19937_64 rng_b;
    double loss_ema = 0.0;
    std::vector<LogRow> log;

    explicit TrainState(const TrainConfig& cfg);
    std::string serialize() const;
    void restore(const std::string& text);
};

struct TrainResult {
    model::ModelParams params;
    std::vector<LogRow> log;
};

// low-level loops; run from st.step to until_step, mutating params in place
void baseline_steps(const TrainConfig& cfg,
                    const std::vector<data::DomainCorpus>& corpora,
                    model::ModelParams& params, TrainState& st, int until_step);
// on_phase_step, when set, is invoked after every optimizer step with the
// phase that just ran; used by freeze-contract checks
void unified_steps(const TrainConfig& cfg,
                   const std::vector<data::DomainCorpus>& corpora,
                   const supervision::TeacherSet* teachers,
                   model::ModelParams& params, TrainState& st, int until_step,
                   const std::function<void(char, const model::ModelParams&)>&
                       on_phase_step = {});

TrainResult train_baseline(const TrainConfig& cfg,
                           const std::vector<data::DomainCorpus>& corpora);
TrainResult finetune_teacher(const TrainConfig& cfg,
                             const model::ModelParams& base,
                             const data::DomainCorpus& corpus);
TrainResult train_domain_control(const TrainConfig& cfg,
                                 const std::vector<data::DomainCorpus>& corpora,
                                 const data::Vocabulary& vocab);
TrainResult train_unified(const TrainConfig& cfg, const model::ModelParams& base,
                          const std::vector<data::DomainCorpus>& corpora,
                          const supervision::TeacherSet* teachers);

}  // namespace dtn::train
