#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "facediff/errors.hpp"
#include "facediff/rng.hpp"

// Tape-based reverse-mode differentiation over row-major dense matrices.
// Vectors are 1 x D matrices. Every op records its value eagerly and, when
// the graph is recording and some input needs a gradient, a closure that
// pushes the output gradient back to its inputs.
namespace facediff::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using GradientMap = std::map<std::string, Mat<S>>;

template <class S>
struct Parameter {
  Mat<S> value;
  bool trainable = true;
  // Optional per-row freeze mask; empty means every row is trainable.
  std::vector<bool> frozen_rows;
};

// Named parameters with deterministic (lexicographic) iteration order.
template <class S>
class ParameterSet {
 public:
  using Map = std::map<std::string, Parameter<S>>;

  Parameter<S>& add(const std::string& name, Mat<S> value);
  Parameter<S>& at(const std::string& name);
  const Parameter<S>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  void erase(const std::string& name) { params_.erase(name); }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  typename Map::iterator begin() { return params_.begin(); }
  typename Map::iterator end() { return params_.end(); }
  typename Map::const_iterator begin() const { return params_.begin(); }
  typename Map::const_iterator end() const { return params_.end(); }

  template <class T>
  ParameterSet<T> cast() const {
    ParameterSet<T> out;
    for (const auto& [name, p] : params_) {
      auto& q = out.add(name, p.value.template cast<T>());
      q.trainable = p.trainable;
      q.frozen_rows = p.frozen_rows;
    }
    return out;
  }

 private:
  Map params_;
};

template <class S>
class Graph;

template <class S>
struct Var {
  Graph<S>* graph = nullptr;
  int id = -1;

  const Mat<S>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <class S>
class Graph {
 public:
  enum class Mode { record, inference };
  using BackwardFn = std::function<void(Graph&, int self)>;

  explicit Graph(Mode mode = Mode::record) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return mode_ == Mode::record; }

  Var<S> constant(Mat<S> value);
  // Differentiable free input; its gradient is readable through grad().
  Var<S> leaf(Mat<S> value);
  // Binds a named parameter. Repeated binds of one name return the same
  // node so gradients from every use accumulate once per use.
  Var<S> param(const std::string& name, const Parameter<S>& p);
  Var<S> param(const ParameterSet<S>& set, const std::string& name) {
    return param(name, set.at(name));
  }

  const Mat<S>& value(int id) const;
  const Mat<S>& grad(Var<S> v) const { return nodes_.at(static_cast<std::size_t>(v.id)).grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Runs reverse accumulation from a scalar loss; returns the gradient of
  // every bound trainable parameter (zeros for ones the loss did not reach).
  GradientMap<S> backward(Var<S> loss);

  // Op construction hooks.
  Var<S> push(Mat<S> value, std::initializer_list<int> parents, BackwardFn fn);
  Var<S> push(Mat<S> value, const std::vector<int>& parents, BackwardFn fn);

  template <class Expr>
  void accumulate(int id, const Expr& g) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }
  // Ensures the node has a zero-initialized gradient buffer and returns it.
  Mat<S>& grad_buffer(int id);
  const Mat<S>& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

 private:
  struct Node {
    Mat<S> value;
    const Mat<S>* external = nullptr;
    Mat<S> grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::string param_name;
    bool trainable_param = false;
  };

  Mode mode_;
  std::vector<Node> nodes_;
  std::map<std::string, int> bound_;
};

template <class S>
const Mat<S>& Var<S>::value() const {
  return graph->value(id);
}

// ---- elementwise and linear algebra ---------------------------------------
template <class S> Var<S> matmul(Var<S> a, Var<S> b);
template <class S> Var<S> add(Var<S> a, Var<S> b);
template <class S> Var<S> sub(Var<S> a, Var<S> b);
template <class S> Var<S> mul(Var<S> a, Var<S> b);
// Adds a 1 x C row to every row of a.
template <class S> Var<S> add_row(Var<S> a, Var<S> row);
template <class S> Var<S> scale(Var<S> a, double c);
template <class S> Var<S> add_scalar(Var<S> a, double c);
template <class S> Var<S> sigmoid(Var<S> a);
template <class S> Var<S> tanh(Var<S> a);
template <class S> Var<S> relu(Var<S> a);
template <class S> Var<S> square(Var<S> a);
template <class S> Var<S> transpose(Var<S> a);

// ---- structural -----------------------------------------------------------
template <class S> Var<S> concat_cols(const std::vector<Var<S>>& parts);
template <class S> Var<S> vstack(const std::vector<Var<S>>& parts);
template <class S> Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index count);
template <class S> Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count);
template <class S> Var<S> gather_rows(Var<S> a, const std::vector<int>& rows);
template <class S> Var<S> gather_cols(Var<S> a, const std::vector<int>& cols);

// ---- reductions and losses (accumulated in double) ------------------------
template <class S> Var<S> sum(Var<S> a);
template <class S> Var<S> mean(Var<S> a);
template <class S> Var<S> mse(Var<S> a, Var<S> b);
// sum_r w_r * sum_c (a - b)^2 / (rows * cols)
template <class S> Var<S> weighted_mse(Var<S> a, Var<S> b, const std::vector<double>& row_weights);
// Each row scaled to unit Euclidean norm; a zero row is an error.
template <class S> Var<S> l2_normalize_rows(Var<S> a);
// Mean over rows of softmax cross-entropy with label i for row i.
template <class S> Var<S> cross_entropy_diagonal(Var<S> logits);

// ---- layers ---------------------------------------------------------------
template <class S> Var<S> dense(Graph<S>& g, const ParameterSet<S>& params,
                                const std::string& prefix, Var<S> x);

// Adds "<prefix>.w" (in x out) and "<prefix>.b" (1 x out) with uniform
// fan-in scaled initialization.
template <class S>
void init_dense(ParameterSet<S>& params, const std::string& prefix, int in, int out,
                Rng& rng, bool bias = true);

// One GRU layer (PyTorch gate convention) over a frame-major batch: row
// f * batch + b holds frame f of sequence b. Returns the hidden sequence
// in the same layout.
template <class S> Var<S> gru_layer(Graph<S>& g, const ParameterSet<S>& params,
                                    const std::string& prefix, Var<S> inputs,
                                    Var<S> h0, Eigen::Index frames,
                                    Eigen::Index batch);

// Stacked GRU: "<prefix>.l0", "<prefix>.l1", ... share the frame-major layout.
template <class S> Var<S> gru_forward(Graph<S>& g, const ParameterSet<S>& params,
                                      const std::string& prefix, int layers,
                                      Var<S> inputs, Var<S> h0,
                                      Eigen::Index frames, Eigen::Index batch);

template <class S>
void init_gru(ParameterSet<S>& params, const std::string& prefix, int layers,
              int input_dim, int hidden, Rng& rng);

// Plain (non-differentiable) row normalization used at inference time.
template <class S>
Mat<S> l2_normalize(const Mat<S>& v);

}  // namespace facediff::nn
