#pragma once

#include <string>

#include "dtn/model.hpp"

// Per-domain residual transformation networks converting general encoder
// representations into domain-specific ones: H' = F(H, W_n) + H. Each domain
// owns a disjoint parameter set under dtn.<domain>.*; final projections are
// zero-initialized so an untrained bank is exactly the identity.
namespace dtn::transform {

enum class DtnKind { attention, ffn };

DtnKind kind_from_string(const std::string& s);
std::string to_string(DtnKind k);

// adds dtn.<d>.* parameters for n_domains domains to an existing map
void init_dtn(model::ModelParams& params, const model::ModelConfig& cfg, int n_domains,
              DtnKind kind, std::uint64_t seed);

int dtn_domains(const model::ModelParams& params);
bool has_dtn(const model::ModelParams& params);

ag::Tensor transform(const model::Forward& f, const ag::Tensor& h,
                     const data::Batch& b, int domain);

}  // namespace dtn::transform
