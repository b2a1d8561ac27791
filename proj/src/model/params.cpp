#include "dsu/model/params.hpp"

#include "dsu/errors.hpp"

#include <cmath>

namespace dsu {

Eigen::MatrixXd& ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    auto [it, inserted] = entries_.try_emplace(name);
    if (!inserted) throw ConfigError("duplicate parameter name: " + name);
    it->second.value.setZero(rows, cols);
    it->second.grad.setZero(rows, cols);
    return it->second.value;
}

const Eigen::MatrixXd& ParamStore::value(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.value;
}

Eigen::MatrixXd& ParamStore::value(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.value;
}

Eigen::MatrixXd& ParamStore::grad(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.grad;
}

const Eigen::MatrixXd& ParamStore::grad(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.grad;
}

void ParamStore::zero_grad() {
    for (auto& [name, e] : entries_) e.grad.setZero();
}

std::int64_t ParamStore::param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.size();
    return n;
}

double ParamStore::grad_norm() const {
    double sq = 0.0;
    for (const auto& [name, e] : entries_) sq += e.grad.squaredNorm();
    return std::sqrt(sq);
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
}

}  // namespace dsu
