#pragma once

// Domain-prompter objectives (domain diversity and prototype consistency),
// evaluated with analytic gradients. No optimizer lives here.

#include "cdfsod/embed.hpp"

#include <span>
#include <vector>

namespace cdfsod {

inline constexpr double kDefaultTauProto = 2.0;
inline constexpr double kDefaultTauDomain = 0.1;

/// Virtual domain vectors; sized 2 * n_classes by convention.
struct DomainBank {
    std::vector<Embedding> domains;

    static std::size_t size_for_classes(std::size_t n_classes) noexcept { return 2 * n_classes; }
};

struct InfoNCETemperatures {
    double tau_proto = kDefaultTauProto;
    double tau_domain = kDefaultTauDomain;
};

enum class Similarity { Cosine, Dot };

struct LossResult {
    double value = 0.0;
    std::vector<Embedding> grad_prototypes;  // empty for loss_domain
    std::vector<Embedding> grad_domains;     // one per bank entry
};

/// Elementwise prototype + domain.
Embedding perturb(const Embedding& prototype, const Embedding& domain);

/// mean_i -log softmax_j(sim(d_i, d_j) / tau)[i]: self-similarity is the
/// positive, every other domain a negative. Needs >= 2 domains
/// (InvalidArgument); throws ZeroVector for a zero domain under cosine.
LossResult loss_domain(const DomainBank& bank, double tau_domain = kDefaultTauDomain,
                       Similarity sim = Similarity::Cosine);

/// InfoNCE over prototypes perturbed by domains k and m: anchor
/// perturb(p_i, d_k), positive perturb(p_i, d_m), negatives perturb(p_j, d_m)
/// for j != i; mean over i. Needs >= 2 prototypes. Gradients cover every
/// prototype and every bank entry (zero for domains other than k and m).
LossResult loss_proto(std::span<const Embedding> prototypes, const DomainBank& bank, std::size_t k, std::size_t m,
                      double tau_proto = kDefaultTauProto, Similarity sim = Similarity::Cosine);

/// Domain-prompter total, L_domain + L_proto.
double loss_total_dp(double value_domain, double value_proto) noexcept;

}  // namespace cdfsod
