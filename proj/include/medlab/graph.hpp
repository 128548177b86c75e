#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "medlab/tensor.hpp"

namespace medlab {

// Handle to a node in a Graph. Cheap to copy; only valid for the graph
// that created it.
struct Var {
  int32_t id = -1;
  bool defined() const { return id >= 0; }
};

// Reverse-mode tape over dense tensors. One graph per loss computation;
// parameters live outside the graph and receive gradients through leaf().
// A Graph is confined to a single thread.
class Graph {
 public:
  explicit Graph(DType mode) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  DType mode() const { return mode_; }
  size_t size() const { return nodes_.size(); }

  // Registers an external parameter. Repeated calls with the same tensor
  // return the same node, so a parameter used by several consumers gets
  // exactly one gradient accumulation per use. After backward(), gradients
  // are summed into param.grad() when param.requires_grad().
  Var leaf(Tensor& param);

  // A value the graph treats as data: no gradient flows into it.
  Var constant(Tensor value);

  const Tensor& value(Var v) const;
  // Gradient accumulated at a node by the most recent backward() call.
  // Zero tensor if the node was not reached.
  Tensor grad_of(Var v) const;

  // ---- differentiable operations ----
  Var matmul(Var a, Var b);                      // [m,k]x[k,n] -> [m,n]
  Var transpose(Var a);                          // 2-D
  Var bmm(Var a, Var b, bool trans_b = false);   // [B,m,k]x[B,k,n] (or [B,n,k] transposed)
  Var add(Var a, Var b);                         // same shape
  Var add_rowvec(Var x, Var v);                  // x[...,d] + v[d]
  Var mul(Var a, Var b);                         // elementwise, same shape
  Var scale(Var x, double c);
  Var row_softmax(Var x);                        // softmax over last axis, max-stabilized
  Var row_log_softmax(Var x);
  Var layer_norm(Var x, Var gamma, Var beta, double eps);
  Var gelu(Var x);                               // tanh approximation
  Var cross_entropy(Var logits, std::vector<int64_t> targets, int64_t ignore_index,
                    double label_smoothing = 0.0);       // [N,V] -> scalar mean NLL
  Var cross_entropy_soft(Var logits, Tensor soft_targets);  // constant target rows
  // Mean KL(teacher || student) over rows; teacher is constant data, student
  // rows are probability vectors. Student entries are floored at 1e-12 before
  // the log. Rows with row_mask==0 are excluded from the mean.
  Var kl_rows_const_teacher(Tensor teacher_rows, Var student_rows,
                            std::vector<uint8_t> row_mask = {});
  Var l2_normalize_rows(Var x);
  Var cosine_rows(Var a, Var b);                 // [R,d],[R,d] -> [R]
  Var sum_all(Var x);                            // -> scalar
  Var mean_all(Var x);                           // -> scalar
  Var mean_masked(Var x, std::vector<uint8_t> mask);  // x[R] -> scalar over mask==1
  Var reshape(Var x, Shape new_shape);
  Var permute(Var x, std::vector<int> axes);
  Var slice(Var x, int axis, int64_t start, int64_t len);
  Var concat(Var a, Var b, int axis);
  Var broadcast_rows(Var v, int64_t rows);       // v[d] -> [rows,d]
  Var embedding(Var table, std::vector<int64_t> ids);      // [V,d], ids[n] -> [n,d]
  Var gather_rows0(Var x, std::vector<int64_t> idx);       // gather along axis 0
  Var div_by_scalar(Var x, Var denom);           // denom is a scalar variable
  Var split_heads(Var x, int64_t heads);         // [B,L,h*dh] -> [B*h,L,dh]
  Var merge_heads(Var x, int64_t heads);         // [B*h,L,dh] -> [B,L,h*dh]
  Var detach(Var x);                             // stop-gradient

  // Seeds d(loss)/d(loss)=1 and walks the tape once in reverse topological
  // order. Gradients are then added into every registered parameter's
  // grad() buffer; calling backward again without zeroing accumulates.
  void backward(Var loss);

 private:
  using BackwardFn = std::function<void(Graph&, int32_t)>;

  struct Node {
    Tensor value;
    Tensor grad;          // lazily allocated scratch, reset per backward
    bool grad_alloc = false;
    bool needs_grad = false;
    Tensor* sink = nullptr;  // leaf parameter to flush gradient into
    BackwardFn backward;
  };

  DType mode_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, int32_t> leaf_index_;

  int32_t push(Tensor value, bool needs_grad, BackwardFn fn);
  Node& node(Var v);
  const Node& node(Var v) const;
  void check_mode(const Tensor& t, const char* op) const;
  bool needs(Var v) const { return node(v).needs_grad; }

  Tensor& grad_buf(int32_t id);
  // Adds src into the node's grad buffer.
  void accum(int32_t id, const Tensor& src);

  friend struct GraphOps;
};

}  // namespace medlab
