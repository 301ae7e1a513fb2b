#include "cdfsod/losses.hpp"

#include "cdfsod/error.hpp"

#include <algorithm>
#include <cmath>

namespace cdfsod {

namespace {

struct Kernel {
    Similarity kind;

    double value(const Embedding& a, const Embedding& b) const {
        return kind == Similarity::Cosine ? dot(a, b) / (norm(a) * norm(b)) : dot(a, b);
    }

    // d sim(a, b) / d a, scaled by `coef` and accumulated into `out`.
    void accumulate_grad_a(const Embedding& a, const Embedding& b, double coef, Embedding& out) const {
        if (kind == Similarity::Dot) {
            for (std::size_t i = 0; i < a.size(); ++i) out[i] += coef * b[i];
            return;
        }
        const double na = norm(a);
        const double nb = norm(b);
        const double c = dot(a, b) / (na * nb);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] += coef * (b[i] / (na * nb) - c * a[i] / (na * na));
    }

    void check(const Embedding& e, const char* what) const {
        if (kind == Similarity::Cosine && !(norm(e) > 0.0))
            throw Error(Errc::ZeroVector, std::string(what) + " has zero norm");
    }
};

Embedding zeros(std::size_t dim) { return Embedding(std::vector<double>(dim, 0.0)); }

// One InfoNCE row: returns -log softmax(logits)[pos] and writes
// d(-log softmax)/d logits into `dlogits`.
double infonce_row(const std::vector<double>& logits, std::size_t pos, std::vector<double>& dlogits) {
    const double hi = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - hi);
    const double lse = hi + std::log(z);
    dlogits.resize(logits.size());
    for (std::size_t j = 0; j < logits.size(); ++j) dlogits[j] = std::exp(logits[j] - lse);
    dlogits[pos] -= 1.0;
    return lse - logits[pos];
}

void require_dims(std::span<const Embedding> xs, std::size_t dim, const char* what) {
    for (const auto& e : xs)
        if (e.size() != dim) throw Error(Errc::DimMismatch, std::string(what) + " dimensions differ");
}

}  // namespace

Embedding perturb(const Embedding& prototype, const Embedding& domain) {
    if (prototype.size() != domain.size()) throw Error(Errc::DimMismatch, "prototype and domain dimensions differ");
    Embedding out = prototype;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += domain[i];
    return out;
}

LossResult loss_domain(const DomainBank& bank, double tau_domain, Similarity sim) {
    const auto& d = bank.domains;
    if (d.size() < 2) throw Error(Errc::InvalidArgument, "domain loss needs at least two domains");
    if (!(tau_domain > 0.0)) throw Error(Errc::NonPositiveTemperature, "tau_domain must be > 0");
    const std::size_t dim = d.front().size();
    require_dims(d, dim, "domain");
    const Kernel kernel{sim};
    for (const auto& e : d) kernel.check(e, "domain");

    const std::size_t n = d.size();
    LossResult res;
    res.grad_domains.assign(n, zeros(dim));
    std::vector<double> logits(n);
    std::vector<double> dl;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) logits[j] = kernel.value(d[i], d[j]) / tau_domain;
        res.value += infonce_row(logits, i, dl);
        for (std::size_t j = 0; j < n; ++j) {
            const double coef = dl[j] / (tau_domain * static_cast<double>(n));
            kernel.accumulate_grad_a(d[i], d[j], coef, res.grad_domains[i]);
            kernel.accumulate_grad_a(d[j], d[i], coef, res.grad_domains[j]);
        }
    }
    res.value /= static_cast<double>(n);
    return res;
}

LossResult loss_proto(std::span<const Embedding> prototypes, const DomainBank& bank, std::size_t k, std::size_t m,
                      double tau_proto, Similarity sim) {
    if (prototypes.size() < 2) throw Error(Errc::InvalidArgument, "prototype loss needs at least two prototypes");
    if (k >= bank.domains.size() || m >= bank.domains.size())
        throw Error(Errc::InvalidArgument, "domain index out of range");
    if (!(tau_proto > 0.0)) throw Error(Errc::NonPositiveTemperature, "tau_proto must be > 0");
    const std::size_t dim = prototypes.front().size();
    require_dims(prototypes, dim, "prototype");
    require_dims(bank.domains, dim, "domain");
    const Kernel kernel{sim};

    const std::size_t n = prototypes.size();
    std::vector<Embedding> anchors;
    std::vector<Embedding> targets;
    for (const auto& p : prototypes) {
        anchors.push_back(perturb(p, bank.domains[k]));
        targets.push_back(perturb(p, bank.domains[m]));
        kernel.check(anchors.back(), "perturbed anchor");
        kernel.check(targets.back(), "perturbed target");
    }

    std::vector<Embedding> ga(n, zeros(dim));
    std::vector<Embedding> gb(n, zeros(dim));
    LossResult res;
    std::vector<double> logits(n);
    std::vector<double> dl;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) logits[j] = kernel.value(anchors[i], targets[j]) / tau_proto;
        res.value += infonce_row(logits, i, dl);
        for (std::size_t j = 0; j < n; ++j) {
            const double coef = dl[j] / (tau_proto * static_cast<double>(n));
            kernel.accumulate_grad_a(anchors[i], targets[j], coef, ga[i]);
            kernel.accumulate_grad_a(targets[j], anchors[i], coef, gb[j]);
        }
    }
    res.value /= static_cast<double>(n);

    res.grad_prototypes.assign(n, zeros(dim));
    res.grad_domains.assign(bank.domains.size(), zeros(dim));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dim; ++c) {
            res.grad_prototypes[i][c] = ga[i][c] + gb[i][c];
            res.grad_domains[k][c] += ga[i][c];
            res.grad_domains[m][c] += gb[i][c];
        }
    }
    return res;
}

double loss_total_dp(double value_domain, double value_proto) noexcept { return value_domain + value_proto; }

}  // namespace cdfsod
