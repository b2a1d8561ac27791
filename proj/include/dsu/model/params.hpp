#pragma once

#include "dsu/model/config.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dsu {

/// Named parameter tensors with paired gradient buffers. Ordered by name
/// so initialization, Adam sweeps, and checkpoints are deterministic.
class ParamStore {
  public:
    struct Entry {
        Eigen::MatrixXd value;
        Eigen::MatrixXd grad;
    };

    Eigen::MatrixXd& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    const Eigen::MatrixXd& value(const std::string& name) const;
    Eigen::MatrixXd& value(const std::string& name);
    Eigen::MatrixXd& grad(const std::string& name);
    const Eigen::MatrixXd& grad(const std::string& name) const;

    void zero_grad();
    std::int64_t param_count() const;
    double grad_norm() const;

    std::vector<std::string> names() const;
    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

  private:
    std::map<std::string, Entry> entries_;
};

}  // namespace dsu
