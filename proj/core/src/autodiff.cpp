#include "facediff/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace facediff::nn {

namespace {

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <class S>
void require_same_shape(const char* op, Var<S> a, Var<S> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shapes " +
                         shape_str(a.rows(), a.cols()) + " and " +
                         shape_str(b.rows(), b.cols()) + " differ");
  }
}

template <class S>
double sum_double(const Mat<S>& m) {
  double acc = 0.0;
  const S* p = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) acc += static_cast<double>(p[i]);
  return acc;
}

template <class S>
Mat<S> scalar_mat(double v) {
  Mat<S> m(1, 1);
  m(0, 0) = static_cast<S>(v);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterSet

template <class S>
Parameter<S>& ParameterSet<S>::add(const std::string& name, Mat<S> value) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) {
    throw ContractError("parameter '" + name + "' already exists");
  }
  it->second.value = std::move(value);
  return it->second;
}

template <class S>
Parameter<S>& ParameterSet<S>::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw LookupError("no parameter named '" + name + "'");
  return it->second;
}

template <class S>
const Parameter<S>& ParameterSet<S>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw LookupError("no parameter named '" + name + "'");
  return it->second;
}

template <class S>
std::size_t ParameterSet<S>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

// ---------------------------------------------------------------------------
// Graph

template <class S>
Var<S> Graph<S>::constant(Mat<S> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <class S>
Var<S> Graph<S>::leaf(Mat<S> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording();
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <class S>
Var<S> Graph<S>::param(const std::string& name, const Parameter<S>& p) {
  if (auto it = bound_.find(name); it != bound_.end()) return {this, it->second};
  Node n;
  n.external = &p.value;
  n.param_name = name;
  n.trainable_param = p.trainable;
  n.requires_grad = recording() && p.trainable;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  bound_[name] = id;
  return {this, id};
}

template <class S>
const Mat<S>& Graph<S>::value(int id) const {
  const auto& n = nodes_[static_cast<std::size_t>(id)];
  return n.external ? *n.external : n.value;
}

template <class S>
Mat<S>& Graph<S>::grad_buffer(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) {
    const auto& v = value(id);
    n.grad = Mat<S>::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

template <class S>
Var<S> Graph<S>::push(Mat<S> value, std::initializer_list<int> parents, BackwardFn fn) {
  return push(std::move(value), std::vector<int>(parents), std::move(fn));
}

template <class S>
Var<S> Graph<S>::push(Mat<S> value, const std::vector<int>& parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (recording()) {
    for (int p : parents) {
      if (nodes_[static_cast<std::size_t>(p)].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <class S>
GradientMap<S> Graph<S>::backward(Var<S> loss) {
  if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
  const auto& lv = value(loss.id);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward: loss must be scalar, got " +
                        shape_str(lv.rows(), lv.cols()));
  }
  if (!recording()) throw ContractError("backward: graph was built in inference mode");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[static_cast<std::size_t>(loss.id)].grad = scalar_mat<S>(1.0);
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, i);
  }
  GradientMap<S> grads;
  for (const auto& [name, id] : bound_) {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.trainable_param) continue;
    if (n.grad.size() == 0) {
      grads[name] = Mat<S>::Zero(n.external->rows(), n.external->cols());
    } else {
      grads[name] = n.grad;
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Ops

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.rows(), a.cols()) + " times " +
                         shape_str(b.rows(), b.cols()));
  }
  Mat<S> out;
  out.noalias() = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return a.graph->push(std::move(out), {ia, ib}, [ia, ib](Graph<S>& g, int self) {
    const Mat<S>& go = g.grad_of(self);
    if (g.requires_grad(ia)) {
      Mat<S> ga;
      ga.noalias() = go * g.value(ib).transpose();
      g.accumulate(ia, ga);
    }
    if (g.requires_grad(ib)) {
      Mat<S> gb;
      gb.noalias() = g.value(ia).transpose() * go;
      g.accumulate(ib, gb);
    }
  });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  require_same_shape("add", a, b);
  const int ia = a.id, ib = b.id;
  return a.graph->push(a.value() + b.value(), {ia, ib}, [ia, ib](Graph<S>& g, int self) {
    g.accumulate(ia, g.grad_of(self));
    g.accumulate(ib, g.grad_of(self));
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  require_same_shape("sub", a, b);
  const int ia = a.id, ib = b.id;
  return a.graph->push(a.value() - b.value(), {ia, ib}, [ia, ib](Graph<S>& g, int self) {
    g.accumulate(ia, g.grad_of(self));
    g.accumulate(ib, -g.grad_of(self));
  });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  require_same_shape("mul", a, b);
  const int ia = a.id, ib = b.id;
  Mat<S> out = a.value().cwiseProduct(b.value());
  return a.graph->push(std::move(out), {ia, ib}, [ia, ib](Graph<S>& g, int self) {
    const Mat<S>& go = g.grad_of(self);
    if (g.requires_grad(ia)) g.accumulate(ia, go.cwiseProduct(g.value(ib)));
    if (g.requires_grad(ib)) g.accumulate(ib, go.cwiseProduct(g.value(ia)));
  });
}

template <class S>
Var<S> add_row(Var<S> a, Var<S> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: row " + shape_str(row.rows(), row.cols()) +
                         " does not broadcast over " + shape_str(a.rows(), a.cols()));
  }
  const int ia = a.id, ir = row.id;
  Mat<S> out = a.value().rowwise() + row.value().row(0);
  return a.graph->push(std::move(out), {ia, ir}, [ia, ir](Graph<S>& g, int self) {
    const Mat<S>& go = g.grad_of(self);
    g.accumulate(ia, go);
    if (g.requires_grad(ir)) g.accumulate(ir, go.colwise().sum());
  });
}

template <class S>
Var<S> scale(Var<S> a, double c) {
  const int ia = a.id;
  const S cs = static_cast<S>(c);
  return a.graph->push(a.value() * cs, {ia}, [ia, cs](Graph<S>& g, int self) {
    g.accumulate(ia, g.grad_of(self) * cs);
  });
}

template <class S>
Var<S> add_scalar(Var<S> a, double c) {
  const int ia = a.id;
  Mat<S> out = a.value().array() + static_cast<S>(c);
  return a.graph->push(std::move(out), {ia}, [ia](Graph<S>& g, int self) {
    g.accumulate(ia, g.grad_of(self));
  });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  const int ia = a.id;
  Mat<S> out = (S(1) + (-a.value().array()).exp()).inverse().matrix();
  return a.graph->push(std::move(out), {ia}, [ia](Graph<S>& g, int self) {
    const auto& y = g.value(self).array();
    g.accumulate(ia, (g.grad_of(self).array() * y * (S(1) - y)).matrix());
  });
}

template <class S>
Var<S> tanh(Var<S> a) {
  const int ia = a.id;
  Mat<S> out = a.value().array().tanh().matrix();
  return a.graph->push(std::move(out), {ia}, [ia](Graph<S>& g, int self) {
    const auto& y = g.value(self).array();
    g.accumulate(ia, (g.grad_of(self).array() * (S(1) - y.square())).matrix());
  });
}

template <class S>
Var<S> relu(Var<S> a) {
  const int ia = a.id;
  Mat<S> out = a.value().cwiseMax(S(0));
  return a.graph->push(std::move(out), {ia}, [ia](Graph<S>& g, int self) {
    const auto& x = g.value(ia).array();
    g.accumulate(ia, (x > S(0)).select(g.grad_of(self).array(), S(0)).matrix());
  });
}

template <class S>
Var<S> square(Var<S> a) {
  const int ia = a.id;
  Mat<S> out = a.value().array().square().matrix();
  return a.graph->push(std::move(out), {ia}, [ia](Graph<S>& g, int self) {
    g.accumulate(ia, (S(2) * g.grad_of(self).array() * g.value(ia).array()).matrix());
  });
}

template <class S>
Var<S> transpose(Var<S> a) {
  const int ia = a.id;
  Mat<S> out = a.value().transpose();
  return a.graph->push(std::move(out), {ia}, [ia](Graph<S>& g, int self) {
    g.accumulate(ia, g.grad_of(self).transpose());
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row counts " + std::to_string(rows) +
                           " and " + std::to_string(p.rows()) + " differ");
    }
    ids.push_back(p.id);
    widths.push_back(p.cols());
    cols += p.cols();
  }
  Mat<S> out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts.front().graph->push(std::move(out), ids, [ids, widths](Graph<S>& g, int self) {
    const Mat<S>& go = g.grad_of(self);
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (g.requires_grad(ids[i])) g.accumulate(ids[i], go.middleCols(off, widths[i]));
      off += widths[i];
    }
  });
}

template <class S>
Var<S> vstack(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("vstack: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw DimensionError("vstack: column counts " + std::to_string(cols) +
                           " and " + std::to_string(p.cols()) + " differ");
    }
    ids.push_back(p.id);
    heights.push_back(p.rows());
    rows += p.rows();
  }
  Mat<S> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().graph->push(std::move(out), ids, [ids, heights](Graph<S>& g, int self) {
    const Mat<S>& go = g.grad_of(self);
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (g.requires_grad(ids[i])) g.accumulate(ids[i], go.middleRows(off, heights[i]));
      off += heights[i];
    }
  });
}

template <class S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" +
                         std::to_string(count) + ") outside " +
                         std::to_string(a.rows()) + " rows");
  }
  const int ia = a.id;
  Mat<S> out = a.value().middleRows(start, count);
  return a.graph->push(std::move(out), {ia}, [ia, start, count](Graph<S>& g, int self) {
    g.grad_buffer(ia).middleRows(start, count) += g.grad_of(self);
  });
}

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" +
                         std::to_string(count) + ") outside " +
                         std::to_string(a.cols()) + " columns");
  }
  const int ia = a.id;
  Mat<S> out = a.value().middleCols(start, count);
  return a.graph->push(std::move(out), {ia}, [ia, start, count](Graph<S>& g, int self) {
    g.grad_buffer(ia).middleCols(start, count) += g.grad_of(self);
  });
}

template <class S>
Var<S> gather_rows(Var<S> a, const std::vector<int>& rows) {
  Mat<S> out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(rows[i]) +
                           " outside " + std::to_string(a.rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const int ia = a.id;
  return a.graph->push(std::move(out), {ia}, [ia, rows](Graph<S>& g, int self) {
    const Mat<S>& go = g.grad_of(self);
    Mat<S>& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      ga.row(rows[i]) += go.row(static_cast<Eigen::Index>(i));
    }
  });
}

template <class S>
Var<S> gather_cols(Var<S> a, const std::vector<int>& cols) {
  Mat<S> out(a.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] < 0 || cols[i] >= a.cols()) {
      throw DimensionError("gather_cols: index " + std::to_string(cols[i]) +
                           " outside " + std::to_string(a.cols()) + " columns");
    }
    out.col(static_cast<Eigen::Index>(i)) = a.value().col(cols[i]);
  }
  const int ia = a.id;
  return a.graph->push(std::move(out), {ia}, [ia, cols](Graph<S>& g, int self) {
    const Mat<S>& go = g.grad_of(self);
    Mat<S>& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < cols.size(); ++i) {
      ga.col(cols[i]) += go.col(static_cast<Eigen::Index>(i));
    }
  });
}

template <class S>
Var<S> sum(Var<S> a) {
  const int ia = a.id;
  return a.graph->push(scalar_mat<S>(sum_double(a.value())), {ia},
                       [ia](Graph<S>& g, int self) {
                         const S go = g.grad_of(self)(0, 0);
                         const auto& v = g.value(ia);
                         g.accumulate(ia, Mat<S>::Constant(v.rows(), v.cols(), go));
                       });
}

template <class S>
Var<S> mean(Var<S> a) {
  const int ia = a.id;
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ContractError("mean: empty input");
  return a.graph->push(scalar_mat<S>(sum_double(a.value()) / n), {ia},
                       [ia, n](Graph<S>& g, int self) {
                         const S go = static_cast<S>(g.grad_of(self)(0, 0) / n);
                         const auto& v = g.value(ia);
                         g.accumulate(ia, Mat<S>::Constant(v.rows(), v.cols(), go));
                       });
}

template <class S>
Var<S> weighted_mse(Var<S> a, Var<S> b, const std::vector<double>& row_weights) {
  require_same_shape("weighted_mse", a, b);
  if (static_cast<Eigen::Index>(row_weights.size()) != a.rows()) {
    throw DimensionError("weighted_mse: " + std::to_string(row_weights.size()) +
                         " row weights for " + std::to_string(a.rows()) + " rows");
  }
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ContractError("weighted_mse: empty input");
  const Mat<S>& av = a.value();
  const Mat<S>& bv = b.value();
  double acc = 0.0;
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    double row = 0.0;
    for (Eigen::Index c = 0; c < av.cols(); ++c) {
      const double d = static_cast<double>(av(r, c)) - static_cast<double>(bv(r, c));
      row += d * d;
    }
    acc += row_weights[static_cast<std::size_t>(r)] * row;
  }
  const int ia = a.id, ib = b.id;
  return a.graph->push(scalar_mat<S>(acc / n), {ia, ib},
                       [ia, ib, n, row_weights](Graph<S>& g, int self) {
                         const double go = static_cast<double>(g.grad_of(self)(0, 0));
                         Mat<S> d = g.value(ia) - g.value(ib);
                         for (Eigen::Index r = 0; r < d.rows(); ++r) {
                           d.row(r) *= static_cast<S>(
                               2.0 * go * row_weights[static_cast<std::size_t>(r)] / n);
                         }
                         if (g.requires_grad(ib)) g.accumulate(ib, -d);
                         g.accumulate(ia, d);
                       });
}

template <class S>
Var<S> mse(Var<S> a, Var<S> b) {
  return weighted_mse(a, b, std::vector<double>(static_cast<std::size_t>(a.rows()), 1.0));
}

template <class S>
Var<S> l2_normalize_rows(Var<S> a) {
  const Mat<S>& v = a.value();
  Mat<S> out(v.rows(), v.cols());
  std::vector<double> norms(static_cast<std::size_t>(v.rows()));
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    double ss = 0.0;
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      ss += static_cast<double>(v(r, c)) * static_cast<double>(v(r, c));
    }
    const double norm = std::sqrt(ss);
    if (!std::isfinite(norm)) {
      throw NumericFault("l2_normalize: row " + std::to_string(r) + " is not finite");
    }
    if (!(norm > 0.0)) {
      throw NormalizationError("l2_normalize: row " + std::to_string(r) +
                               " has zero norm");
    }
    norms[static_cast<std::size_t>(r)] = norm;
    out.row(r) = (v.row(r).template cast<double>() / norm).template cast<S>();
  }
  const int ia = a.id;
  return a.graph->push(std::move(out), {ia}, [ia, norms](Graph<S>& g, int self) {
    const Mat<S>& go = g.grad_of(self);
    const Mat<S>& y = g.value(self);
    Mat<S> ga(go.rows(), go.cols());
    for (Eigen::Index r = 0; r < go.rows(); ++r) {
      const S dot = go.row(r).dot(y.row(r));
      ga.row(r) = (go.row(r) - dot * y.row(r)) /
                  static_cast<S>(norms[static_cast<std::size_t>(r)]);
    }
    g.accumulate(ia, ga);
  });
}

template <class S>
Var<S> cross_entropy_diagonal(Var<S> logits) {
  const Mat<S>& L = logits.value();
  if (L.rows() != L.cols()) {
    throw ContractError("cross_entropy_diagonal: logits must be square, got " +
                        shape_str(L.rows(), L.cols()));
  }
  const Eigen::Index m = L.rows();
  Eigen::MatrixXd probs(m, m);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < m; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < m; ++c) mx = std::max(mx, static_cast<double>(L(r, c)));
    double z = 0.0;
    for (Eigen::Index c = 0; c < m; ++c) {
      probs(r, c) = std::exp(static_cast<double>(L(r, c)) - mx);
      z += probs(r, c);
    }
    probs.row(r) /= z;
    loss += (mx + std::log(z)) - static_cast<double>(L(r, r));
  }
  loss /= static_cast<double>(m);
  const int il = logits.id;
  return logits.graph->push(scalar_mat<S>(loss), {il}, [il, probs, m](Graph<S>& g, int self) {
    const double go = static_cast<double>(g.grad_of(self)(0, 0));
    Eigen::MatrixXd d = probs;
    d.diagonal().array() -= 1.0;
    d *= go / static_cast<double>(m);
    g.accumulate(il, d.cast<S>());
  });
}

// ---------------------------------------------------------------------------
// Layers

template <class S>
Var<S> dense(Graph<S>& g, const ParameterSet<S>& params, const std::string& prefix,
             Var<S> x) {
  Var<S> y = matmul(x, g.param(params, prefix + ".w"));
  if (params.contains(prefix + ".b")) y = add_row(y, g.param(params, prefix + ".b"));
  return y;
}

template <class S>
void init_dense(ParameterSet<S>& params, const std::string& prefix, int in, int out,
                Rng& rng, bool bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  params.add(prefix + ".w", uniform<Mat<S>>(in, out, -bound, bound, rng));
  if (bias) params.add(prefix + ".b", uniform<Mat<S>>(1, out, -bound, bound, rng));
}

template <class S>
Var<S> gru_layer(Graph<S>& g, const ParameterSet<S>& params, const std::string& prefix,
                 Var<S> inputs, Var<S> h0, Eigen::Index frames, Eigen::Index batch) {
  if (inputs.rows() != frames * batch) {
    throw DimensionError("gru_layer: " + std::to_string(inputs.rows()) +
                         " input rows for " + std::to_string(frames) + " frames x " +
                         std::to_string(batch) + " sequences");
  }
  Var<S> w_ih = g.param(params, prefix + ".w_ih");
  Var<S> w_hh = g.param(params, prefix + ".w_hh");
  Var<S> b_ih = g.param(params, prefix + ".b_ih");
  Var<S> b_hh = g.param(params, prefix + ".b_hh");
  const Eigen::Index hidden = w_hh.rows();
  if (w_ih.rows() != inputs.cols() || w_ih.cols() != 3 * hidden ||
      w_hh.cols() != 3 * hidden) {
    throw DimensionError("gru_layer '" + prefix + "': weights do not match input width " +
                         std::to_string(inputs.cols()) + " and hidden " +
                         std::to_string(hidden));
  }
  if (h0.rows() != batch || h0.cols() != hidden) {
    throw DimensionError("gru_layer: initial state must be " + shape_str(batch, hidden));
  }
  // Input projections for every frame at once; only the recurrent product
  // is evaluated per frame.
  Var<S> gi_all = add_row(matmul(inputs, w_ih), b_ih);
  std::vector<Var<S>> outputs;
  outputs.reserve(static_cast<std::size_t>(frames));
  Var<S> h = h0;
  for (Eigen::Index f = 0; f < frames; ++f) {
    Var<S> gi = slice_rows(gi_all, f * batch, batch);
    Var<S> gh = add_row(matmul(h, w_hh), b_hh);
    Var<S> r = sigmoid(add(slice_cols(gi, 0, hidden), slice_cols(gh, 0, hidden)));
    Var<S> z = sigmoid(add(slice_cols(gi, hidden, hidden), slice_cols(gh, hidden, hidden)));
    Var<S> n = tanh(add(slice_cols(gi, 2 * hidden, hidden),
                        mul(r, slice_cols(gh, 2 * hidden, hidden))));
    // h' = (1 - z) * n + z * h = n + z * (h - n)
    h = add(n, mul(z, sub(h, n)));
    outputs.push_back(h);
  }
  return vstack(outputs);
}

template <class S>
Var<S> gru_forward(Graph<S>& g, const ParameterSet<S>& params, const std::string& prefix,
                   int layers, Var<S> inputs, Var<S> h0, Eigen::Index frames,
                   Eigen::Index batch) {
  Var<S> x = inputs;
  for (int l = 0; l < layers; ++l) {
    x = gru_layer(g, params, prefix + ".l" + std::to_string(l), x, h0, frames, batch);
  }
  return x;
}

template <class S>
void init_gru(ParameterSet<S>& params, const std::string& prefix, int layers,
              int input_dim, int hidden, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (int l = 0; l < layers; ++l) {
    const std::string p = prefix + ".l" + std::to_string(l);
    const int in = l == 0 ? input_dim : hidden;
    params.add(p + ".w_ih", uniform<Mat<S>>(in, 3 * hidden, -bound, bound, rng));
    params.add(p + ".w_hh", uniform<Mat<S>>(hidden, 3 * hidden, -bound, bound, rng));
    params.add(p + ".b_ih", uniform<Mat<S>>(1, 3 * hidden, -bound, bound, rng));
    params.add(p + ".b_hh", uniform<Mat<S>>(1, 3 * hidden, -bound, bound, rng));
  }
}

template <class S>
Mat<S> l2_normalize(const Mat<S>& v) {
  Mat<S> out(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double norm = v.row(r).template cast<double>().norm();
    if (!std::isfinite(norm)) {
      throw NumericFault("l2_normalize: row " + std::to_string(r) + " is not finite");
    }
    if (!(norm > 0.0)) {
      throw NormalizationError("l2_normalize: row " + std::to_string(r) +
                               " has zero norm");
    }
    out.row(r) = (v.row(r).template cast<double>() / norm).template cast<S>();
  }
  return out;
}

#define FACEDIFF_INSTANTIATE(S)                                                        \
  template class ParameterSet<S>;                                                      \
  template class Graph<S>;                                                             \
  template Var<S> matmul(Var<S>, Var<S>);                                              \
  template Var<S> add(Var<S>, Var<S>);                                                 \
  template Var<S> sub(Var<S>, Var<S>);                                                 \
  template Var<S> mul(Var<S>, Var<S>);                                                 \
  template Var<S> add_row(Var<S>, Var<S>);                                             \
  template Var<S> scale(Var<S>, double);                                               \
  template Var<S> add_scalar(Var<S>, double);                                          \
  template Var<S> sigmoid(Var<S>);                                                     \
  template Var<S> tanh(Var<S>);                                                        \
  template Var<S> relu(Var<S>);                                                        \
  template Var<S> square(Var<S>);                                                      \
  template Var<S> transpose(Var<S>);                                                   \
  template Var<S> concat_cols(const std::vector<Var<S>>&);                             \
  template Var<S> vstack(const std::vector<Var<S>>&);                                  \
  template Var<S> slice_rows(Var<S>, Eigen::Index, Eigen::Index);                      \
  template Var<S> slice_cols(Var<S>, Eigen::Index, Eigen::Index);                      \
  template Var<S> gather_rows(Var<S>, const std::vector<int>&);                        \
  template Var<S> gather_cols(Var<S>, const std::vector<int>&);                        \
  template Var<S> sum(Var<S>);                                                         \
  template Var<S> mean(Var<S>);                                                        \
  template Var<S> mse(Var<S>, Var<S>);                                                 \
  template Var<S> weighted_mse(Var<S>, Var<S>, const std::vector<double>&);            \
  template Var<S> l2_normalize_rows(Var<S>);                                           \
  template Var<S> cross_entropy_diagonal(Var<S>);                                      \
  template Var<S> dense(Graph<S>&, const ParameterSet<S>&, const std::string&, Var<S>); \
  template void init_dense(ParameterSet<S>&, const std::string&, int, int, Rng&, bool); \
  template Var<S> gru_layer(Graph<S>&, const ParameterSet<S>&, const std::string&,     \
                            Var<S>, Var<S>, Eigen::Index, Eigen::Index);               \
  template Var<S> gru_forward(Graph<S>&, const ParameterSet<S>&, const std::string&,   \
                              int, Var<S>, Var<S>, Eigen::Index, Eigen::Index);        \
  template void init_gru(ParameterSet<S>&, const std::string&, int, int, int, Rng&);   \
  template Mat<S> l2_normalize(const Mat<S>&);

FACEDIFF_INSTANTIATE(float)
FACEDIFF_INSTANTIATE(double)

#undef FACEDIFF_INSTANTIATE

}  // namespace facediff::nn
