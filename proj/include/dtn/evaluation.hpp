#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dtn/domain_transform.hpp"
#include "dtn/model.hpp"

// BLEU scoring, paired-bootstrap significance, the cross-domain DTN matrix,
// representation probes and exports, and report assembly.
namespace dtn::eval {

using Sentences = std::vector<std::vector<int>>;

// corpus-level 4-gram BLEU in [0, 100], brevity penalty, no smoothing;
// single reference per hypothesis
double bleu(const Sentences& hypotheses, const Sentences& references);

// paired bootstrap over sentence indices; returns the fraction of resamples
// where system A outscores B, ties counted as 0.5 — small values mean B is
// reliably better, A == B gives exactly 0.5
double bootstrap_significance(const Sentences& hyps_a, const Sentences& hyps_b,
                              const Sentences& refs, int n_resamples,
                              std::uint64_t seed);

struct DecodeOptions {
    int batch_tokens = 512;
    int dtn_domain = -1;    // route through this DTN; -1 decodes from H
    int prepend_tag = -1;   // token id prepended to every source; -1 none
};

// greedy decode of a whole corpus with a frozen model
Sentences decode_corpus(const model::ModelConfig& cfg,
                        const model::ModelParams& params,
                        const data::DomainCorpus& corpus,
                        const DecodeOptions& opt);

struct CrossMatrix {
    int n = 0;
    std::vector<double> bleu;         // row-major; (i, j) = DTN i on domain j
    std::vector<bool> diag_dominant;  // per column: diagonal is the column max

    double at(int i, int j) const { return bleu[i * n + j]; }
    bool all_columns_dominant() const;
};

CrossMatrix cross_domain_matrix(const model::ModelConfig& cfg,
                                const model::ModelParams& params,
                                const std::vector<data::DomainCorpus>& tests,
                                int batch_tokens);

enum class ProbeSite { encoder_out, dtn_out };
ProbeSite site_from_string(const std::string& s);

// trains a fresh pooled softmax classifier for a fixed 300 steps on frozen
// representations of the even-indexed sentences, reports held-out accuracy
// on the odd-indexed ones
double probe_classifier_accuracy(const model::ModelConfig& cfg,
                                 const model::ModelParams& params,
                                 const std::vector<data::DomainCorpus>& corpora,
                                 ProbeSite site, std::uint64_t seed,
                                 int batch_tokens = 512, int steps = 300);

// mean-pooled H and H' per sentence as CSV rows, with a 2-component
// principal-component projection written to out_path + ".proj.csv"
void export_representations(const model::ModelConfig& cfg,
                            const model::ModelParams& params,
                            const std::vector<data::DomainCorpus>& corpora,
                            const std::string& out_path, int batch_tokens = 512);

// first two principal components of `rows` points of dimension d
std::vector<std::array<double, 2>> pca2(const std::vector<std::vector<double>>& points);

struct EvalReport {
    std::vector<std::string> domain_names;
    std::vector<double> per_domain;  // BLEU
    double average = 0.0;
    std::string reference_name;        // empty when no comparison was made
    std::vector<double> deltas;        // vs the reference system
    std::vector<bool> significant;     // bootstrap p < threshold per domain
    double significance_threshold = 0.05;
    std::string checkpoint_hash;
    std::string config_summary;
    std::uint64_t seed = 0;

    std::string to_text() const;
    std::string to_csv() const;
};

EvalReport make_report(const std::vector<std::string>& domain_names,
                       const std::vector<double>& per_domain);

}  // namespace dtn::eval
