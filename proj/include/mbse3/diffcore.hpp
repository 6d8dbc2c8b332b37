#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace mbse3::diff {

/// Dense row-major array of doubles with shared immutable storage.
/// Copies are shallow; the values of a tensor already handed to a Tape
/// must not be mutated afterwards.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor zeros_like(const Tensor& other);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int size() const { return size_; }
  bool empty() const { return data_ == nullptr; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  double& at(int i) { return (*data_)[static_cast<size_t>(i)]; }
  double at(int i) const { return (*data_)[static_cast<size_t>(i)]; }
  double& at2(int i, int j) { return (*data_)[static_cast<size_t>(i) * dim(1) + j]; }
  double at2(int i, int j) const { return (*data_)[static_cast<size_t>(i) * dim(1) + j]; }
  double& at3(int i, int j, int k) {
    return (*data_)[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  double at3(int i, int j, int k) const {
    return (*data_)[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  /// Value of a single-element tensor.
  double value() const;

  /// Same storage, new shape (element counts must agree).
  Tensor reshaped(std::vector<int> shape) const;
  bool all_finite() const;

 private:
  std::vector<int> shape_;
  int size_ = 0;
  std::shared_ptr<std::vector<double>> data_;
};

/// Named parameter arrays plus per-parameter Adam state.
class ParamStore {
 public:
  void register_param(const std::string& name, Tensor init);
  bool contains(const std::string& name) const;
  const Tensor& value(const std::string& name) const;
  void set_value(const std::string& name, Tensor v);
  long step_count(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  struct Entry {
    Tensor value;
    Tensor moment1;
    Tensor moment2;
    long step = 0;
  };
  std::map<std::string, Entry> entries_;

  friend void adam_step(ParamStore& store, const std::map<std::string, Tensor>& grads, double lr);
};

/// Bias-corrected Adam (beta1 0.9, beta2 0.999, eps 1e-8) over every
/// registered parameter; missing gradients count as zero. A non-finite
/// gradient aborts before any parameter or step count changes.
void adam_step(ParamStore& store, const std::map<std::string, Tensor>& grads, double lr);

/// JSON checkpoint {name -> {shape, values}}, row-major, exact double
/// round-trip. Optimizer moments are not persisted.
void save_checkpoint(const ParamStore& store, const std::string& path);
ParamStore load_checkpoint(const std::string& path);

/// Eager reverse-mode tape. Building an expression records it; backward()
/// walks the records once in reverse. Node handles are indices and stay
/// valid for the life of the tape.
class Tape {
 public:
  /// Constant leaf: no gradient is tracked through it.
  int input(Tensor t);
  /// Differentiable leaf.
  int leaf(Tensor t);
  /// Differentiable leaf bound to a named parameter in the store.
  int param(const ParamStore& store, const std::string& name);

  const Tensor& val(int id) const;

  /// 2D GEMM or 3D batch-matmul (leading dims equal); flags transpose the
  /// trailing two axes of either operand.
  int matmul(int a, int b, bool transpose_a = false, bool transpose_b = false);
  /// Elementwise with right-aligned broadcasting (rank <= 4).
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int div(int a, int b);
  /// scale * a + shift, elementwise.
  int affine(int a, double scale, double shift);
  int leaky_relu(int a, double negative_slope);
  int log(int a);
  int exp(int a);
  /// Last-axis softmax / log-softmax.
  int softmax(int a);
  int log_softmax(int a);
  /// Max along one axis (dropped from the shape); ties go to the lowest
  /// index and the gradient flows only to the winner.
  int max_over_axis(int a, int axis);
  int sum_all(int a);
  /// Rows of a rank-2 tensor by index (repeats allowed); gradient
  /// scatter-adds back.
  int gather_rows(int a, std::vector<int> rows);
  int concat(int a, int b, int axis);
  /// Metadata-only reshape sharing storage.
  int reshape(int a, std::vector<int> shape);
  /// Rank-2 transpose (materialized).
  int transpose2d(int a);

  /// Seeds the output with the cotangent (ones if omitted) and accumulates
  /// gradients into every differentiable node.
  void backward(int output);
  void backward(int output, const Tensor& cotangent);
  /// Accumulated gradient (zeros if none flowed).
  Tensor grad(int id) const;
  /// Gradients for all bound parameters, summed over repeated bindings.
  std::map<std::string, Tensor> param_grads() const;

  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  enum class Op {
    kLeaf,
    kMatmul,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kAffine,
    kLeakyRelu,
    kLog,
    kExp,
    kSoftmax,
    kLogSoftmax,
    kMaxOverAxis,
    kSumAll,
    kGatherRows,
    kConcat,
    kReshape,
    kTranspose2D,
  };
  struct Node {
    Op op = Op::kLeaf;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    bool transpose_a = false;
    bool transpose_b = false;
    int axis = 0;
    double scale = 1.0;
    double shift = 0.0;
    std::vector<int> index;  // gather rows or max winners
    std::string param_name;
  };

  int push(Node node);
  void accumulate(int id, const Tensor& delta);
  void backward_node(int id);

  std::vector<Node> nodes_;
};

}  // namespace mbse3::diff
