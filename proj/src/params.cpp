#include "metabridge/params.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace metabridge::diff {

namespace {

const Tensor& grad_for(const ParamSet& params, const GradMap& grads, const std::string& name) {
  const auto it = grads.find(name);
  if (it == grads.end()) {
    throw std::invalid_argument("optimizer: missing gradient for parameter '" + name + "'");
  }
  if (!it->second.same_shape(params.at(name))) {
    throw std::invalid_argument("optimizer: gradient shape " + shape_str(it->second.shape()) +
                                " does not match parameter '" + name + "' " +
                                shape_str(params.at(name).shape()));
  }
  return it->second;
}

}  // namespace

GradResult gradient(const LossBuilder& build, const ParamSet& params) {
  Graph g;
  NodeMap handles;
  std::vector<ValueId> leaves;
  std::vector<const std::string*> names;
  leaves.reserve(params.size());
  for (const auto& [name, tensor] : params) {
    const ValueId id = g.leaf(tensor);
    handles.emplace(name, id);
    leaves.push_back(id);
    names.push_back(&name);
  }
  const ValueId loss = build(g, handles);
  const double loss_value = g.val(loss).item();
  if (!std::isfinite(loss_value)) {
    throw std::runtime_error("gradient: loss is non-finite (" + std::to_string(loss_value) + ")");
  }
  const std::vector<ValueId> adjoints = g.backward(loss, leaves);
  GradResult out;
  out.loss = loss_value;
  for (size_t i = 0; i < leaves.size(); ++i) {
    const std::string& name = *names[i];
    if (adjoints[i] == kNoValue) {
      out.grads.emplace(name, Tensor::zeros(params.at(name).shape()));
    } else {
      out.grads.emplace(name, g.val(adjoints[i]));
    }
  }
  return out;
}

ParamSet sgd_step(const ParamSet& params, const GradMap& grads, double step_size) {
  ParamSet out;
  for (const auto& [name, p] : params) {
    const Tensor& g = grad_for(params, grads, name);
    Tensor next(p.shape());
    const double* pp = p.data();
    const double* pg = g.data();
    double* pn = next.data();
    for (int64_t i = 0; i < p.size(); ++i) pn[i] = pp[i] - step_size * pg[i];
    out.emplace(name, std::move(next));
  }
  return out;
}

std::pair<ParamSet, AdamState> adam_step(const ParamSet& params, const GradMap& grads,
                                         const AdamState& state, double alpha) {
  AdamState next_state;
  next_state.step = state.step + 1;
  const double t = static_cast<double>(next_state.step);
  const double bc1 = 1.0 - std::pow(kAdamBeta1, t);
  const double bc2 = 1.0 - std::pow(kAdamBeta2, t);
  ParamSet out;
  for (const auto& [name, p] : params) {
    const Tensor& g = grad_for(params, grads, name);
    const auto mit = state.m.find(name);
    const auto vit = state.v.find(name);
    Tensor m = (mit != state.m.end()) ? mit->second : Tensor::zeros(p.shape());
    Tensor v = (vit != state.v.end()) ? vit->second : Tensor::zeros(p.shape());
    if (!m.same_shape(p) || !v.same_shape(p)) {
      throw std::invalid_argument("adam_step: moment shape does not match parameter '" + name +
                                  "'");
    }
    Tensor next(p.shape());
    const double* pp = p.data();
    const double* pg = g.data();
    double* pm = m.data();
    double* pv = v.data();
    double* pn = next.data();
    for (int64_t i = 0; i < p.size(); ++i) {
      pm[i] = kAdamBeta1 * pm[i] + (1.0 - kAdamBeta1) * pg[i];
      pv[i] = kAdamBeta2 * pv[i] + (1.0 - kAdamBeta2) * pg[i] * pg[i];
      const double m_hat = pm[i] / bc1;
      const double v_hat = pv[i] / bc2;
      pn[i] = pp[i] - alpha * m_hat / (std::sqrt(v_hat) + kAdamEpsilon);
    }
    next_state.m.emplace(name, std::move(m));
    next_state.v.emplace(name, std::move(v));
    out.emplace(name, std::move(next));
  }
  return {std::move(out), std::move(next_state)};
}

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params, bool as_f32) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) {
    throw std::runtime_error("save_checkpoint: cannot open " + (dir / "manifest.txt").string());
  }
  std::ofstream blob(dir / "tensors.bin", std::ios::binary);
  if (!blob) {
    throw std::runtime_error("save_checkpoint: cannot open " + (dir / "tensors.bin").string());
  }
  const char* dtype = as_f32 ? "f32" : "f64";
  for (const auto& [name, tensor] : params) {
    manifest << name << ' ' << dtype;
    for (size_t i = 0; i < tensor.rank(); ++i) manifest << ' ' << tensor.dim(i);
    manifest << '\n';
    if (as_f32) {
      std::vector<float> narrow(static_cast<size_t>(tensor.size()));
      for (int64_t i = 0; i < tensor.size(); ++i) {
        narrow[static_cast<size_t>(i)] = static_cast<float>(tensor[i]);
      }
      blob.write(reinterpret_cast<const char*>(narrow.data()),
                 static_cast<std::streamsize>(narrow.size() * sizeof(float)));
    } else {
      blob.write(reinterpret_cast<const char*>(tensor.data()),
                 static_cast<std::streamsize>(tensor.size() * sizeof(double)));
    }
  }
  if (!manifest.good() || !blob.good()) {
    throw std::runtime_error("save_checkpoint: write to " + dir.string() + " failed");
  }
}

ParamSet load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) {
    throw std::runtime_error("load_checkpoint: cannot open " + (dir / "manifest.txt").string());
  }
  struct Entry {
    std::string name;
    bool f32 = false;
    Shape shape;
  };
  std::vector<Entry> entries;
  std::string line;
  std::string prev_name;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream in(line);
    Entry e;
    std::string dtype;
    if (!(in >> e.name >> dtype)) {
      throw std::runtime_error("load_checkpoint: malformed manifest line '" + line + "'");
    }
    if (dtype == "f32") {
      e.f32 = true;
    } else if (dtype != "f64") {
      throw std::runtime_error("load_checkpoint: unsupported dtype '" + dtype + "' for tensor '" +
                               e.name + "'");
    }
    int64_t dim = 0;
    while (in >> dim) e.shape.push_back(dim);
    if (!entries.empty() && e.name <= prev_name) {
      throw std::runtime_error("load_checkpoint: manifest names not in lexicographic order near '" +
                               e.name + "'");
    }
    prev_name = e.name;
    entries.push_back(std::move(e));
  }
  uint64_t expected_bytes = 0;
  for (const Entry& e : entries) {
    expected_bytes +=
        static_cast<uint64_t>(shape_size(e.shape)) * (e.f32 ? sizeof(float) : sizeof(double));
  }
  std::ifstream blob(dir / "tensors.bin", std::ios::binary);
  if (!blob) {
    throw std::runtime_error("load_checkpoint: cannot open " + (dir / "tensors.bin").string());
  }
  blob.seekg(0, std::ios::end);
  const uint64_t actual_bytes = static_cast<uint64_t>(blob.tellg());
  if (actual_bytes != expected_bytes) {
    throw std::runtime_error("load_checkpoint: tensors.bin holds " + std::to_string(actual_bytes) +
                             " bytes, manifest expects " + std::to_string(expected_bytes));
  }
  blob.seekg(0, std::ios::beg);
  ParamSet out;
  for (const Entry& e : entries) {
    const int64_t count = shape_size(e.shape);
    std::vector<double> values(static_cast<size_t>(count));
    if (e.f32) {
      std::vector<float> narrow(static_cast<size_t>(count));
      blob.read(reinterpret_cast<char*>(narrow.data()),
                static_cast<std::streamsize>(narrow.size() * sizeof(float)));
      for (int64_t i = 0; i < count; ++i) {
        values[static_cast<size_t>(i)] = static_cast<double>(narrow[static_cast<size_t>(i)]);
      }
    } else {
      blob.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
    }
    if (!blob.good()) {
      throw std::runtime_error("load_checkpoint: short read for tensor '" + e.name + "'");
    }
    out.emplace(e.name, Tensor(e.shape, std::move(values)));
  }
  return out;
}

}  // namespace metabridge::diff
