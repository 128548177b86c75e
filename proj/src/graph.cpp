#include "medlab/graph.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace medlab {

namespace {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<RowMat<S>>;
template <class S>
using CMapM = Eigen::Map<const RowMat<S>>;

constexpr double kProbFloor = 1e-12;
constexpr double kNormFloor = 1e-12;

int64_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

int64_t rows_of(const Tensor& t) {
  int64_t d = last_dim(t.shape());
  return d == 0 ? 0 : t.numel() / d;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

}  // namespace

// ---------------------------------------------------------------- machinery

int32_t Graph::push(Tensor value, bool needs_grad, BackwardFn fn) {
  check_mode(value, "push");
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return static_cast<int32_t>(nodes_.size()) - 1;
}

Graph::Node& Graph::node(Var v) {
  if (!v.defined() || v.id >= static_cast<int32_t>(nodes_.size()))
    throw ContractError("Var does not belong to this graph");
  return nodes_[static_cast<size_t>(v.id)];
}

const Graph::Node& Graph::node(Var v) const {
  if (!v.defined() || v.id >= static_cast<int32_t>(nodes_.size()))
    throw ContractError("Var does not belong to this graph");
  return nodes_[static_cast<size_t>(v.id)];
}

void Graph::check_mode(const Tensor& t, const char* op) const {
  if (t.dtype() != mode_)
    throw ConfigError(std::string(op) + ": tensor dtype " + dtype_name(t.dtype()) +
                      " does not match graph mode " + dtype_name(mode_));
}

Var Graph::leaf(Tensor& param) {
  auto it = leaf_index_.find(&param);
  if (it != leaf_index_.end()) return Var{it->second};
  check_mode(param, "leaf");
  Tensor copy = param;
  copy.drop_grad();
  copy.set_requires_grad(false);
  int32_t id = push(std::move(copy), param.requires_grad(), {});
  nodes_[static_cast<size_t>(id)].sink = &param;
  leaf_index_.emplace(&param, id);
  return Var{id};
}

Var Graph::constant(Tensor value) {
  return Var{push(std::move(value), false, {})};
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

Tensor Graph::grad_of(Var v) const {
  const Node& n = node(v);
  if (!n.grad_alloc) return Tensor::zeros(n.value.shape(), mode_);
  return n.grad;
}

Tensor& Graph::grad_buf(int32_t id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_alloc) {
    n.grad = Tensor::zeros(n.value.shape(), mode_);
    n.grad_alloc = true;
  }
  return n.grad;
}

void Graph::accum(int32_t id, const Tensor& src) { grad_buf(id).add_scaled(src, 1.0); }

void Graph::backward(Var loss) {
  Node& ln = node(loss);
  if (ln.value.numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(ln.value.shape()));
  for (Node& n : nodes_)
    if (n.grad_alloc) n.grad.fill(0.0);
  grad_buf(loss.id).fill(1.0);
  for (int32_t id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad || !n.grad_alloc || !n.backward) continue;
    n.backward(*this, id);
  }
  for (Node& n : nodes_) {
    if (n.sink && n.sink->requires_grad() && n.grad_alloc)
      n.sink->grad().add_scaled(n.grad, 1.0);
  }
}

// ------------------------------------------------------------------- matmul

Var Graph::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.rank() == 2 && tb.rank() == 2 && ta.dim(1) == tb.dim(0),
          "matmul: incompatible shapes " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
  int64_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
  Tensor out = Tensor::zeros({m, n}, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    CMapM<S> A(ta.data<S>().data(), m, k), B(tb.data<S>().data(), k, n);
    MapM<S> C(out.data<S>().data(), m, n);
    C.noalias() = A * B;
    return 0;
  });
  bool ng = needs(a) || needs(b);
  int32_t ia = a.id, ib = b.id;
  return Var{push(std::move(out), ng, [ia, ib, m, k, n](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    const Tensor& A = g.nodes_[(size_t)ia].value;
    const Tensor& B = g.nodes_[(size_t)ib].value;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      CMapM<S> Gm(G.data<S>().data(), m, n), Am(A.data<S>().data(), m, k),
          Bm(B.data<S>().data(), k, n);
      if (g.nodes_[(size_t)ia].needs_grad) {
        MapM<S> dA(g.grad_buf(ia).data<S>().data(), m, k);
        dA.noalias() += Gm * Bm.transpose();
      }
      if (g.nodes_[(size_t)ib].needs_grad) {
        MapM<S> dB(g.grad_buf(ib).data<S>().data(), k, n);
        dB.noalias() += Am.transpose() * Gm;
      }
      return 0;
    });
  })};
}

Var Graph::transpose(Var a) {
  const Tensor& ta = value(a);
  require(ta.rank() == 2, "transpose: expected rank-2, got " + shape_str(ta.shape()));
  int64_t m = ta.dim(0), n = ta.dim(1);
  Tensor out = Tensor::zeros({n, m}, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    CMapM<S> A(ta.data<S>().data(), m, n);
    MapM<S> C(out.data<S>().data(), n, m);
    C = A.transpose();
    return 0;
  });
  int32_t ia = a.id;
  return Var{push(std::move(out), needs(a), [ia, m, n](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      CMapM<S> Gm(G.data<S>().data(), n, m);
      MapM<S> dA(g.grad_buf(ia).data<S>().data(), m, n);
      dA += Gm.transpose();
      return 0;
    });
  })};
}

Var Graph::bmm(Var a, Var b, bool trans_b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.rank() == 3 && tb.rank() == 3 && ta.dim(0) == tb.dim(0),
          "bmm: incompatible shapes " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
  int64_t bs = ta.dim(0), m = ta.dim(1), k = ta.dim(2);
  int64_t n = trans_b ? tb.dim(1) : tb.dim(2);
  int64_t bk = trans_b ? tb.dim(2) : tb.dim(1);
  require(bk == k, "bmm: inner dims disagree " + shape_str(ta.shape()) + " x " +
                       shape_str(tb.shape()) + (trans_b ? " (b transposed)" : ""));
  Tensor out = Tensor::zeros({bs, m, n}, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pa = ta.data<S>().data();
    auto pb = tb.data<S>().data();
    auto pc = out.data<S>().data();
    for (int64_t i = 0; i < bs; ++i) {
      CMapM<S> A(pa + i * m * k, m, k);
      MapM<S> C(pc + i * m * n, m, n);
      if (trans_b) {
        CMapM<S> B(pb + i * n * k, n, k);
        C.noalias() = A * B.transpose();
      } else {
        CMapM<S> B(pb + i * k * n, k, n);
        C.noalias() = A * B;
      }
    }
    return 0;
  });
  bool ng = needs(a) || needs(b);
  int32_t ia = a.id, ib = b.id;
  return Var{push(std::move(out), ng,
                  [ia, ib, bs, m, k, n, trans_b](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    const Tensor& A = g.nodes_[(size_t)ia].value;
    const Tensor& B = g.nodes_[(size_t)ib].value;
    bool na = g.nodes_[(size_t)ia].needs_grad, nb = g.nodes_[(size_t)ib].needs_grad;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>().data();
      auto pa = A.data<S>().data();
      auto pb = B.data<S>().data();
      S* pda = na ? g.grad_buf(ia).data<S>().data() : nullptr;
      S* pdb = nb ? g.grad_buf(ib).data<S>().data() : nullptr;
      for (int64_t i = 0; i < bs; ++i) {
        CMapM<S> Gm(pg + i * m * n, m, n);
        CMapM<S> Am(pa + i * m * k, m, k);
        if (trans_b) {
          CMapM<S> Bm(pb + i * n * k, n, k);
          if (na) {
            MapM<S> dA(pda + i * m * k, m, k);
            dA.noalias() += Gm * Bm;
          }
          if (nb) {
            MapM<S> dB(pdb + i * n * k, n, k);
            dB.noalias() += Gm.transpose() * Am;
          }
        } else {
          CMapM<S> Bm(pb + i * k * n, k, n);
          if (na) {
            MapM<S> dA(pda + i * m * k, m, k);
            dA.noalias() += Gm * Bm.transpose();
          }
          if (nb) {
            MapM<S> dB(pdb + i * k * n, k, n);
            dB.noalias() += Am.transpose() * Gm;
          }
        }
      }
      return 0;
    });
  })};
}

// -------------------------------------------------------------- elementwise

Var Graph::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape() == tb.shape(),
          "add: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  Tensor out = Tensor::zeros(ta.shape(), mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pa = ta.data<S>();
    auto pb = tb.data<S>();
    auto po = out.data<S>();
    for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + pb[i];
    return 0;
  });
  bool ng = needs(a) || needs(b);
  int32_t ia = a.id, ib = b.id;
  return Var{push(std::move(out), ng, [ia, ib](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    if (g.nodes_[(size_t)ia].needs_grad) g.accum(ia, G);
    if (g.nodes_[(size_t)ib].needs_grad) g.accum(ib, G);
  })};
}

Var Graph::add_rowvec(Var x, Var v) {
  const Tensor& tx = value(x);
  const Tensor& tv = value(v);
  int64_t d = last_dim(tx.shape());
  require(tv.rank() == 1 && tv.dim(0) == d,
          "add_rowvec: vector " + shape_str(tv.shape()) + " vs rows of " + shape_str(tx.shape()));
  int64_t rows = rows_of(tx);
  Tensor out = Tensor::zeros(tx.shape(), mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto px = tx.data<S>();
    auto pv = tv.data<S>();
    auto po = out.data<S>();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pv[j];
    return 0;
  });
  bool ng = needs(x) || needs(v);
  int32_t ix = x.id, iv = v.id;
  return Var{push(std::move(out), ng, [ix, iv, rows, d](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    if (g.nodes_[(size_t)ix].needs_grad) g.accum(ix, G);
    if (g.nodes_[(size_t)iv].needs_grad) {
      with_dtype(g.mode_, [&](auto s) {
        using S = decltype(s);
        auto pg = G.data<S>();
        auto pdv = g.grad_buf(iv).data<S>();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < d; ++j) pdv[j] += pg[r * d + j];
        return 0;
      });
    }
  })};
}

Var Graph::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape() == tb.shape(),
          "mul: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  Tensor out = Tensor::zeros(ta.shape(), mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pa = ta.data<S>();
    auto pb = tb.data<S>();
    auto po = out.data<S>();
    for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * pb[i];
    return 0;
  });
  bool ng = needs(a) || needs(b);
  int32_t ia = a.id, ib = b.id;
  return Var{push(std::move(out), ng, [ia, ib](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    const Tensor& A = g.nodes_[(size_t)ia].value;
    const Tensor& B = g.nodes_[(size_t)ib].value;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>();
      if (g.nodes_[(size_t)ia].needs_grad) {
        auto pda = g.grad_buf(ia).data<S>();
        auto pb = B.data<S>();
        for (size_t i = 0; i < pg.size(); ++i) pda[i] += pg[i] * pb[i];
      }
      if (g.nodes_[(size_t)ib].needs_grad) {
        auto pdb = g.grad_buf(ib).data<S>();
        auto pa = A.data<S>();
        for (size_t i = 0; i < pg.size(); ++i) pdb[i] += pg[i] * pa[i];
      }
      return 0;
    });
  })};
}

Var Graph::scale(Var x, double c) {
  const Tensor& tx = value(x);
  Tensor out = Tensor::zeros(tx.shape(), mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto px = tx.data<S>();
    auto po = out.data<S>();
    const S cs = S(c);
    for (size_t i = 0; i < po.size(); ++i) po[i] = px[i] * cs;
    return 0;
  });
  int32_t ix = x.id;
  return Var{push(std::move(out), needs(x), [ix, c](Graph& g, int32_t self) {
    g.grad_buf(ix).add_scaled(g.nodes_[(size_t)self].grad, c);
  })};
}

// ------------------------------------------------------ softmax / layernorm

Var Graph::row_softmax(Var x) {
  const Tensor& tx = value(x);
  require(tx.rank() >= 1, "row_softmax: rank must be >= 1");
  int64_t d = last_dim(tx.shape());
  int64_t rows = rows_of(tx);
  Tensor out = Tensor::zeros(tx.shape(), mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    // Below this gap the true probability is sub-denormal; flush to exact
    // zero (the vectorized exp returns denormals instead of underflowing).
    const S floor_gap = sizeof(S) == 8 ? S(-709) : S(-88);
    auto px = tx.data<S>();
    auto po = out.data<S>();
    for (int64_t r = 0; r < rows; ++r) {
      Eigen::Map<const Arr> row(px.data() + r * d, d);
      Eigen::Map<Arr> orow(po.data() + r * d, d);
      S mx = row.maxCoeff();
      Arr gap = row - mx;
      orow = (gap < floor_gap).select(Arr::Zero(d), gap.exp());
      orow /= orow.sum();
    }
    return 0;
  });
  int32_t ix = x.id;
  return Var{push(std::move(out), needs(x), [ix, rows, d](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    const Tensor& Y = g.nodes_[(size_t)self].value;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>();
      auto py = Y.data<S>();
      auto pdx = g.grad_buf(ix).data<S>();
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = pg.data() + r * d;
        const S* yr = py.data() + r * d;
        S dot = S(0);
        for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
        S* dr = pdx.data() + r * d;
        for (int64_t j = 0; j < d; ++j) dr[j] += yr[j] * (gr[j] - dot);
      }
      return 0;
    });
  })};
}

Var Graph::row_log_softmax(Var x) {
  const Tensor& tx = value(x);
  int64_t d = last_dim(tx.shape());
  int64_t rows = rows_of(tx);
  Tensor out = Tensor::zeros(tx.shape(), mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    auto px = tx.data<S>();
    auto po = out.data<S>();
    for (int64_t r = 0; r < rows; ++r) {
      Eigen::Map<const Arr> row(px.data() + r * d, d);
      Eigen::Map<Arr> orow(po.data() + r * d, d);
      S mx = row.maxCoeff();
      S lse = std::log((row - mx).exp().sum()) + mx;
      orow = row - lse;
    }
    return 0;
  });
  int32_t ix = x.id;
  return Var{push(std::move(out), needs(x), [ix, rows, d](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    const Tensor& Y = g.nodes_[(size_t)self].value;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>();
      auto py = Y.data<S>();
      auto pdx = g.grad_buf(ix).data<S>();
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = pg.data() + r * d;
        const S* yr = py.data() + r * d;
        S gsum = S(0);
        for (int64_t j = 0; j < d; ++j) gsum += gr[j];
        S* dr = pdx.data() + r * d;
        for (int64_t j = 0; j < d; ++j) dr[j] += gr[j] - std::exp(yr[j]) * gsum;
      }
      return 0;
    });
  })};
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& tx = value(x);
  const Tensor& tg = value(gamma);
  const Tensor& tb = value(beta);
  int64_t d = last_dim(tx.shape());
  require(eps > 0, "layer_norm: eps must be positive");
  require(tg.rank() == 1 && tg.dim(0) == d && tb.rank() == 1 && tb.dim(0) == d,
          "layer_norm: gamma/beta " + shape_str(tg.shape()) + "/" + shape_str(tb.shape()) +
              " vs rows of " + shape_str(tx.shape()));
  int64_t rows = rows_of(tx);
  Tensor out = Tensor::zeros(tx.shape(), mode_);
  // Cache inverse std per row for backward.
  Tensor inv_std = Tensor::zeros({rows}, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto px = tx.data<S>();
    auto pg = tg.data<S>();
    auto pb = tb.data<S>();
    auto po = out.data<S>();
    auto pis = inv_std.data<S>();
    for (int64_t r = 0; r < rows; ++r) {
      const S* row = px.data() + r * d;
      S mean = S(0);
      for (int64_t j = 0; j < d; ++j) mean += row[j];
      mean /= S(d);
      S var = S(0);
      for (int64_t j = 0; j < d; ++j) {
        S c = row[j] - mean;
        var += c * c;
      }
      var /= S(d);
      S is = S(1) / std::sqrt(var + S(eps));
      pis[r] = is;
      S* orow = po.data() + r * d;
      for (int64_t j = 0; j < d; ++j) orow[j] = (row[j] - mean) * is * pg[j] + pb[j];
    }
    return 0;
  });
  bool ng = needs(x) || needs(gamma) || needs(beta);
  int32_t ix = x.id, ig = gamma.id, ib = beta.id;
  Tensor inv_std_c = inv_std;
  return Var{push(std::move(out), ng,
                  [ix, ig, ib, rows, d, inv_std_c](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    const Tensor& X = g.nodes_[(size_t)ix].value;
    const Tensor& Ga = g.nodes_[(size_t)ig].value;
    bool nx = g.nodes_[(size_t)ix].needs_grad;
    bool ngam = g.nodes_[(size_t)ig].needs_grad;
    bool nbet = g.nodes_[(size_t)ib].needs_grad;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pgr = G.data<S>();
      auto px = X.data<S>();
      auto pga = Ga.data<S>();
      auto pis = inv_std_c.data<S>();
      S* pdx = nx ? g.grad_buf(ix).data<S>().data() : nullptr;
      S* pdg = ngam ? g.grad_buf(ig).data<S>().data() : nullptr;
      S* pdb = nbet ? g.grad_buf(ib).data<S>().data() : nullptr;
      std::vector<S> xhat(static_cast<size_t>(d));
      for (int64_t r = 0; r < rows; ++r) {
        const S* row = px.data() + r * d;
        const S* gr = pgr.data() + r * d;
        S is = pis[r];
        S mean = S(0);
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= S(d);
        for (int64_t j = 0; j < d; ++j) xhat[(size_t)j] = (row[j] - mean) * is;
        if (pdg || pdb) {
          for (int64_t j = 0; j < d; ++j) {
            if (pdg) pdg[j] += gr[j] * xhat[(size_t)j];
            if (pdb) pdb[j] += gr[j];
          }
        }
        if (pdx) {
          S m1 = S(0), m2 = S(0);
          for (int64_t j = 0; j < d; ++j) {
            S gg = gr[j] * pga[j];
            m1 += gg;
            m2 += gg * xhat[(size_t)j];
          }
          m1 /= S(d);
          m2 /= S(d);
          S* dr = pdx + r * d;
          for (int64_t j = 0; j < d; ++j) {
            S gg = gr[j] * pga[j];
            dr[j] += (gg - m1 - xhat[(size_t)j] * m2) * is;
          }
        }
      }
      return 0;
    });
  })};
}

Var Graph::gelu(Var x) {
  const Tensor& tx = value(x);
  Tensor out = Tensor::zeros(tx.shape(), mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    const S a = S(0.044715);
    Eigen::Map<const Arr> xv(tx.data<S>().data(), tx.numel());
    Eigen::Map<Arr> ov(out.data<S>().data(), tx.numel());
    ov = S(0.5) * xv * (S(1) + (c * (xv + a * xv.cube())).tanh());
    return 0;
  });
  int32_t ix = x.id;
  return Var{push(std::move(out), needs(x), [ix](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    const Tensor& X = g.nodes_[(size_t)ix].value;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
      const S c = S(0.7978845608028654);
      const S a = S(0.044715);
      Eigen::Map<const Arr> gv(G.data<S>().data(), G.numel());
      Eigen::Map<const Arr> xv(X.data<S>().data(), X.numel());
      Eigen::Map<Arr> dv(g.grad_buf(ix).data<S>().data(), X.numel());
      Arr t = (c * (xv + a * xv.cube())).tanh();
      dv += gv * (S(0.5) * (S(1) + t) +
                  S(0.5) * xv * (S(1) - t.square()) * c * (S(1) + S(3) * a * xv.square()));
      return 0;
    });
  })};
}

// ------------------------------------------------------------------- losses

Var Graph::cross_entropy(Var logits, std::vector<int64_t> targets, int64_t ignore_index,
                         double label_smoothing) {
  const Tensor& tl = value(logits);
  require(tl.rank() == 2, "cross_entropy: logits must be [N,V], got " + shape_str(tl.shape()));
  int64_t N = tl.dim(0), V = tl.dim(1);
  if (static_cast<int64_t>(targets.size()) != N)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(N) + " rows");
  for (int64_t t : targets)
    if (t != ignore_index && (t < 0 || t >= V))
      throw IndexError("cross_entropy: target " + std::to_string(t) + " out of [0," +
                       std::to_string(V) + ")");
  int64_t n_valid = 0;
  for (int64_t t : targets)
    if (t != ignore_index) ++n_valid;

  Tensor out = Tensor::scalar(0.0, mode_);
  Tensor logp = Tensor::zeros({N, V}, mode_);  // cached for backward
  double loss = 0.0;
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pl = tl.data<S>();
    auto pp = logp.data<S>();
    for (int64_t i = 0; i < N; ++i) {
      if (targets[(size_t)i] == ignore_index) continue;
      const S* row = pl.data() + i * V;
      S* prow = pp.data() + i * V;
      S mx = row[0];
      for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
      S sum = S(0);
      for (int64_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
      S lse = std::log(sum) + mx;
      double row_lp_sum = 0.0;
      for (int64_t j = 0; j < V; ++j) {
        prow[j] = row[j] - lse;
        row_lp_sum += static_cast<double>(prow[j]);
      }
      double lp_t = static_cast<double>(prow[targets[(size_t)i]]);
      loss -= (1.0 - label_smoothing) * lp_t + label_smoothing / static_cast<double>(V) * row_lp_sum;
    }
    return 0;
  });
  if (n_valid > 0) loss /= static_cast<double>(n_valid);
  out.set(0, loss);

  int32_t il = logits.id;
  Tensor logp_c = logp;
  std::vector<int64_t> tg = std::move(targets);
  return Var{push(std::move(out), needs(logits),
                  [il, tg, ignore_index, label_smoothing, N, V, n_valid, logp_c](Graph& g,
                                                                                 int32_t self) {
    if (n_valid == 0) return;
    double gscale = g.nodes_[(size_t)self].grad.at(0) / static_cast<double>(n_valid);
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pp = logp_c.data<S>();
      auto pdx = g.grad_buf(il).data<S>();
      const S eps_v = S(label_smoothing / static_cast<double>(V));
      const S one_m = S(1.0 - label_smoothing);
      const S gs = S(gscale);
      for (int64_t i = 0; i < N; ++i) {
        if (tg[(size_t)i] == ignore_index) continue;
        const S* prow = pp.data() + i * V;
        S* drow = pdx.data() + i * V;
        for (int64_t j = 0; j < V; ++j) {
          S p = std::exp(prow[j]);
          S q = eps_v + (j == tg[(size_t)i] ? one_m : S(0));
          drow[j] += gs * (p - q);
        }
      }
      return 0;
    });
  })};
}

Var Graph::cross_entropy_soft(Var logits, Tensor soft_targets) {
  const Tensor& tl = value(logits);
  require(tl.rank() == 2 && soft_targets.shape() == tl.shape(),
          "cross_entropy_soft: targets " + shape_str(soft_targets.shape()) + " vs logits " +
              shape_str(tl.shape()));
  int64_t N = tl.dim(0), V = tl.dim(1);
  Tensor st = soft_targets.to_dtype(mode_);
  Tensor logp = Tensor::zeros({N, V}, mode_);
  double loss = 0.0;
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pl = tl.data<S>();
    auto pq = st.data<S>();
    auto pp = logp.data<S>();
    for (int64_t i = 0; i < N; ++i) {
      const S* row = pl.data() + i * V;
      S* prow = pp.data() + i * V;
      S mx = row[0];
      for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
      S sum = S(0);
      for (int64_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
      S lse = std::log(sum) + mx;
      for (int64_t j = 0; j < V; ++j) {
        prow[j] = row[j] - lse;
        loss -= static_cast<double>(pq[i * V + j]) * static_cast<double>(prow[j]);
      }
    }
    return 0;
  });
  loss /= static_cast<double>(N);
  Tensor out = Tensor::scalar(loss, mode_);
  int32_t il = logits.id;
  Tensor st_c = st, logp_c = logp;
  return Var{push(std::move(out), needs(logits),
                  [il, N, V, st_c, logp_c](Graph& g, int32_t self) {
    double gscale = g.nodes_[(size_t)self].grad.at(0) / static_cast<double>(N);
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pq = st_c.data<S>();
      auto pp = logp_c.data<S>();
      auto pdx = g.grad_buf(il).data<S>();
      const S gs = S(gscale);
      for (int64_t i = 0; i < N; ++i) {
        const S* prow = pp.data() + i * V;
        const S* qrow = pq.data() + i * V;
        S qsum = S(0);
        for (int64_t j = 0; j < V; ++j) qsum += qrow[j];
        S* drow = pdx.data() + i * V;
        for (int64_t j = 0; j < V; ++j)
          drow[j] += gs * (std::exp(prow[j]) * qsum - qrow[j]);
      }
      return 0;
    });
  })};
}

Var Graph::kl_rows_const_teacher(Tensor teacher_rows, Var student_rows,
                                 std::vector<uint8_t> row_mask) {
  const Tensor& ts = value(student_rows);
  require(teacher_rows.shape() == ts.shape(),
          "kl_rows: teacher " + shape_str(teacher_rows.shape()) + " vs student " +
              shape_str(ts.shape()));
  int64_t d = last_dim(ts.shape());
  int64_t rows = rows_of(ts);
  if (!row_mask.empty() && static_cast<int64_t>(row_mask.size()) != rows)
    throw ShapeError("kl_rows: mask length " + std::to_string(row_mask.size()) + " vs " +
                     std::to_string(rows) + " rows");
  Tensor tt = teacher_rows.to_dtype(mode_);
  int64_t n_sel = 0;
  double loss = 0.0;
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pt = tt.data<S>();
    auto ps = ts.data<S>();
    for (int64_t r = 0; r < rows; ++r) {
      if (!row_mask.empty() && !row_mask[(size_t)r]) continue;
      ++n_sel;
      for (int64_t j = 0; j < d; ++j) {
        double t = static_cast<double>(pt[r * d + j]);
        if (t <= 0.0) continue;  // 0 * log(0/s) == 0
        double sv = std::max(static_cast<double>(ps[r * d + j]), kProbFloor);
        loss += t * (std::log(t) - std::log(sv));
      }
    }
    return 0;
  });
  if (n_sel > 0) loss /= static_cast<double>(n_sel);
  Tensor out = Tensor::scalar(loss, mode_);
  int32_t is = student_rows.id;
  Tensor tt_c = tt;
  std::vector<uint8_t> mask = std::move(row_mask);
  return Var{push(std::move(out), needs(student_rows),
                  [is, rows, d, n_sel, tt_c, mask](Graph& g, int32_t self) {
    if (n_sel == 0) return;
    double gscale = g.nodes_[(size_t)self].grad.at(0) / static_cast<double>(n_sel);
    const Tensor& Sv = g.nodes_[(size_t)is].value;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pt = tt_c.data<S>();
      auto ps = Sv.data<S>();
      auto pdx = g.grad_buf(is).data<S>();
      for (int64_t r = 0; r < rows; ++r) {
        if (!mask.empty() && !mask[(size_t)r]) continue;
        for (int64_t j = 0; j < d; ++j) {
          double t = static_cast<double>(pt[r * d + j]);
          if (t <= 0.0) continue;
          double sv = static_cast<double>(ps[r * d + j]);
          if (sv <= kProbFloor) continue;  // clamped region: zero gradient
          pdx[r * d + j] += S(-gscale * t / sv);
        }
      }
      return 0;
    });
  })};
}

// --------------------------------------------------------------- normalizers

Var Graph::l2_normalize_rows(Var x) {
  const Tensor& tx = value(x);
  int64_t d = last_dim(tx.shape());
  int64_t rows = rows_of(tx);
  Tensor out = Tensor::zeros(tx.shape(), mode_);
  Tensor norms = Tensor::zeros({rows}, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto px = tx.data<S>();
    auto po = out.data<S>();
    auto pn = norms.data<S>();
    for (int64_t r = 0; r < rows; ++r) {
      const S* row = px.data() + r * d;
      double nsq = 0.0;
      for (int64_t j = 0; j < d; ++j) nsq += static_cast<double>(row[j]) * row[j];
      S nrm = S(std::max(std::sqrt(nsq), kNormFloor));
      pn[r] = nrm;
      S* orow = po.data() + r * d;
      for (int64_t j = 0; j < d; ++j) orow[j] = row[j] / nrm;
    }
    return 0;
  });
  int32_t ix = x.id;
  Tensor norms_c = norms;
  return Var{push(std::move(out), needs(x), [ix, rows, d, norms_c](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    const Tensor& Y = g.nodes_[(size_t)self].value;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>();
      auto py = Y.data<S>();
      auto pn = norms_c.data<S>();
      auto pdx = g.grad_buf(ix).data<S>();
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = pg.data() + r * d;
        const S* yr = py.data() + r * d;
        S dot = S(0);
        for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
        S* dr = pdx.data() + r * d;
        for (int64_t j = 0; j < d; ++j) dr[j] += (gr[j] - dot * yr[j]) / pn[r];
      }
      return 0;
    });
  })};
}

Var Graph::cosine_rows(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape() == tb.shape() && ta.rank() == 2,
          "cosine_rows: need matching [R,d], got " + shape_str(ta.shape()) + " vs " +
              shape_str(tb.shape()));
  int64_t rows = ta.dim(0), d = ta.dim(1);
  Tensor out = Tensor::zeros({rows}, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pa = ta.data<S>();
    auto pb = tb.data<S>();
    auto po = out.data<S>();
    for (int64_t r = 0; r < rows; ++r) {
      const S* ar = pa.data() + r * d;
      const S* br = pb.data() + r * d;
      double dot = 0, na = 0, nb = 0;
      for (int64_t j = 0; j < d; ++j) {
        dot += static_cast<double>(ar[j]) * br[j];
        na += static_cast<double>(ar[j]) * ar[j];
        nb += static_cast<double>(br[j]) * br[j];
      }
      double denom = std::max(std::sqrt(na) * std::sqrt(nb), kNormFloor);
      po[r] = S(dot / denom);
    }
    return 0;
  });
  bool ng = needs(a) || needs(b);
  int32_t ia = a.id, ib = b.id;
  return Var{push(std::move(out), ng, [ia, ib, rows, d](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    const Tensor& A = g.nodes_[(size_t)ia].value;
    const Tensor& B = g.nodes_[(size_t)ib].value;
    bool na_ = g.nodes_[(size_t)ia].needs_grad, nb_ = g.nodes_[(size_t)ib].needs_grad;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>();
      auto pa = A.data<S>();
      auto pb = B.data<S>();
      S* pda = na_ ? g.grad_buf(ia).data<S>().data() : nullptr;
      S* pdb = nb_ ? g.grad_buf(ib).data<S>().data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const S* ar = pa.data() + r * d;
        const S* br = pb.data() + r * d;
        double dot = 0, nasq = 0, nbsq = 0;
        for (int64_t j = 0; j < d; ++j) {
          dot += static_cast<double>(ar[j]) * br[j];
          nasq += static_cast<double>(ar[j]) * ar[j];
          nbsq += static_cast<double>(br[j]) * br[j];
        }
        double na = std::max(std::sqrt(nasq), kNormFloor);
        double nb = std::max(std::sqrt(nbsq), kNormFloor);
        double c = dot / (na * nb);
        double gr = static_cast<double>(pg[r]);
        if (pda) {
          S* dra = pda + r * d;
          for (int64_t j = 0; j < d; ++j)
            dra[j] += S(gr * (br[j] / (na * nb) - c * ar[j] / (na * na)));
        }
        if (pdb) {
          S* drb = pdb + r * d;
          for (int64_t j = 0; j < d; ++j)
            drb[j] += S(gr * (ar[j] / (na * nb) - c * br[j] / (nb * nb)));
        }
      }
      return 0;
    });
  })};
}

// --------------------------------------------------------------- reductions

Var Graph::sum_all(Var x) {
  const Tensor& tx = value(x);
  double s = 0.0;
  for (int64_t i = 0; i < tx.numel(); ++i) s += tx.at(i);
  Tensor out = Tensor::scalar(s, mode_);
  int32_t ix = x.id;
  return Var{push(std::move(out), needs(x), [ix](Graph& g, int32_t self) {
    double gv = g.nodes_[(size_t)self].grad.at(0);
    Tensor& dx = g.grad_buf(ix);
    with_dtype(g.mode_, [&](auto s2) {
      using S = decltype(s2);
      auto p = dx.data<S>();
      for (size_t i = 0; i < p.size(); ++i) p[i] += S(gv);
      return 0;
    });
  })};
}

Var Graph::mean_all(Var x) {
  const Tensor& tx = value(x);
  int64_t n = tx.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += tx.at(i);
  Tensor out = Tensor::scalar(s / static_cast<double>(n), mode_);
  int32_t ix = x.id;
  return Var{push(std::move(out), needs(x), [ix, n](Graph& g, int32_t self) {
    double gv = g.nodes_[(size_t)self].grad.at(0) / static_cast<double>(n);
    Tensor& dx = g.grad_buf(ix);
    with_dtype(g.mode_, [&](auto s2) {
      using S = decltype(s2);
      auto p = dx.data<S>();
      for (size_t i = 0; i < p.size(); ++i) p[i] += S(gv);
      return 0;
    });
  })};
}

Var Graph::mean_masked(Var x, std::vector<uint8_t> mask) {
  const Tensor& tx = value(x);
  require(tx.rank() == 1, "mean_masked: expected rank-1, got " + shape_str(tx.shape()));
  if (static_cast<int64_t>(mask.size()) != tx.numel())
    throw ShapeError("mean_masked: mask length " + std::to_string(mask.size()) + " vs " +
                     std::to_string(tx.numel()));
  int64_t n_sel = 0;
  double s = 0.0;
  for (int64_t i = 0; i < tx.numel(); ++i) {
    if (mask[(size_t)i]) {
      s += tx.at(i);
      ++n_sel;
    }
  }
  Tensor out = Tensor::scalar(n_sel ? s / static_cast<double>(n_sel) : 0.0, mode_);
  int32_t ix = x.id;
  std::vector<uint8_t> m = std::move(mask);
  return Var{push(std::move(out), needs(x), [ix, m, n_sel](Graph& g, int32_t self) {
    if (n_sel == 0) return;
    double gv = g.nodes_[(size_t)self].grad.at(0) / static_cast<double>(n_sel);
    Tensor& dx = g.grad_buf(ix);
    with_dtype(g.mode_, [&](auto s2) {
      using S = decltype(s2);
      auto p = dx.data<S>();
      for (size_t i = 0; i < p.size(); ++i)
        if (m[i]) p[i] += S(gv);
      return 0;
    });
  })};
}

// ------------------------------------------------------------ rearrangement

Var Graph::reshape(Var x, Shape new_shape) {
  const Tensor& tx = value(x);
  Tensor out = tx.reshaped(new_shape);
  out.set_requires_grad(false);
  int32_t ix = x.id;
  Shape old_shape = tx.shape();
  return Var{push(std::move(out), needs(x), [ix, old_shape](Graph& g, int32_t self) {
    Tensor gr = g.nodes_[(size_t)self].grad.reshaped(old_shape);
    g.accum(ix, gr);
  })};
}

namespace {

std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[(size_t)i] = st[(size_t)i + 1] * s[(size_t)i + 1];
  return st;
}

// For each input axis a, the stride its coordinate contributes in the output.
std::vector<int64_t> permuted_out_strides(const Shape& in_shape, const Shape& out_shape,
                                          const std::vector<int>& axes) {
  auto ostr = strides_of(out_shape);
  std::vector<int64_t> map(in_shape.size(), 0);
  for (size_t oa = 0; oa < axes.size(); ++oa) map[(size_t)axes[oa]] = ostr[oa];
  return map;
}

// out[permuted position] = in[flat]
template <class S>
void permute_copy(const Tensor& in, Tensor& out, const std::vector<int>& axes) {
  auto istr = strides_of(in.shape());
  auto omap = permuted_out_strides(in.shape(), out.shape(), axes);
  auto pi = in.data<S>();
  auto po = out.data<S>();
  int rank = in.rank();
  int64_t n = in.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t rem = flat;
    int64_t opos = 0;
    for (int a = 0; a < rank; ++a) {
      int64_t coord = rem / istr[(size_t)a];
      rem %= istr[(size_t)a];
      opos += coord * omap[(size_t)a];
    }
    po[(size_t)opos] = pi[(size_t)flat];
  }
}

// grad_in[flat] += grad_out[permuted position]
template <class S>
void permute_add(const Tensor& grad_out, Tensor& grad_in, const std::vector<int>& axes) {
  auto istr = strides_of(grad_in.shape());
  auto omap = permuted_out_strides(grad_in.shape(), grad_out.shape(), axes);
  auto pg = grad_out.data<S>();
  auto pd = grad_in.data<S>();
  int rank = grad_in.rank();
  int64_t n = grad_in.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t rem = flat;
    int64_t opos = 0;
    for (int a = 0; a < rank; ++a) {
      int64_t coord = rem / istr[(size_t)a];
      rem %= istr[(size_t)a];
      opos += coord * omap[(size_t)a];
    }
    pd[(size_t)flat] += pg[(size_t)opos];
  }
}

}  // namespace

Var Graph::permute(Var x, std::vector<int> axes) {
  const Tensor& tx = value(x);
  int rank = tx.rank();
  require(static_cast<int>(axes.size()) == rank, "permute: axes count vs rank");
  std::vector<int> seen(static_cast<size_t>(rank), 0);
  Shape out_shape(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    int a = axes[(size_t)i];
    require(a >= 0 && a < rank && !seen[(size_t)a], "permute: invalid axes");
    seen[(size_t)a] = 1;
    out_shape[(size_t)i] = tx.dim(a);
  }
  Tensor out = Tensor::zeros(out_shape, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    permute_copy<S>(tx, out, axes);
    return 0;
  });
  int32_t ix = x.id;
  return Var{push(std::move(out), needs(x), [ix, axes](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    Tensor& dx = g.grad_buf(ix);
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      permute_add<S>(G, dx, axes);
      return 0;
    });
  })};
}

namespace {
// Decomposes a shape around an axis into [outer, axis, inner].
void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& ax, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[(size_t)i];
  ax = s[(size_t)axis];
  for (size_t i = (size_t)axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace

Var Graph::slice(Var x, int axis, int64_t start, int64_t len) {
  const Tensor& tx = value(x);
  if (axis < 0) axis += tx.rank();
  require(axis >= 0 && axis < tx.rank(), "slice: bad axis");
  require(start >= 0 && len > 0 && start + len <= tx.dim(axis),
          "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") out of dim " + std::to_string(tx.dim(axis)));
  int64_t outer, ax, inner;
  axis_split(tx.shape(), axis, outer, ax, inner);
  Shape os = tx.shape();
  os[(size_t)axis] = len;
  Tensor out = Tensor::zeros(os, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pi = tx.data<S>();
    auto po = out.data<S>();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t a = 0; a < len; ++a)
        std::copy_n(pi.data() + (o * ax + start + a) * inner, inner,
                    po.data() + (o * len + a) * inner);
    return 0;
  });
  int32_t ix = x.id;
  return Var{push(std::move(out), needs(x),
                  [ix, outer, ax, inner, start, len](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    Tensor& dx = g.grad_buf(ix);
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>();
      auto pd = dx.data<S>();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < len; ++a) {
          const S* src = pg.data() + (o * len + a) * inner;
          S* dst = pd.data() + (o * ax + start + a) * inner;
          for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
        }
      return 0;
    });
  })};
}

Var Graph::concat(Var a, Var b, int axis) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (axis < 0) axis += ta.rank();
  require(ta.rank() == tb.rank() && axis >= 0 && axis < ta.rank(), "concat: rank/axis mismatch");
  for (int i = 0; i < ta.rank(); ++i)
    require(i == axis || ta.dim(i) == tb.dim(i),
            "concat: shapes " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  int64_t outer, axa, inner;
  axis_split(ta.shape(), axis, outer, axa, inner);
  int64_t axb = tb.dim(axis);
  Shape os = ta.shape();
  os[(size_t)axis] = axa + axb;
  Tensor out = Tensor::zeros(os, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pa = ta.data<S>();
    auto pb = tb.data<S>();
    auto po = out.data<S>();
    int64_t axo = axa + axb;
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(pa.data() + o * axa * inner, axa * inner, po.data() + o * axo * inner);
      std::copy_n(pb.data() + o * axb * inner, axb * inner,
                  po.data() + (o * axo + axa) * inner);
    }
    return 0;
  });
  bool ng = needs(a) || needs(b);
  int32_t ia = a.id, ib = b.id;
  return Var{push(std::move(out), ng,
                  [ia, ib, outer, axa, axb, inner](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    int64_t axo = axa + axb;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>();
      if (g.nodes_[(size_t)ia].needs_grad) {
        auto pd = g.grad_buf(ia).data<S>();
        for (int64_t o = 0; o < outer; ++o) {
          const S* src = pg.data() + o * axo * inner;
          S* dst = pd.data() + o * axa * inner;
          for (int64_t j = 0; j < axa * inner; ++j) dst[j] += src[j];
        }
      }
      if (g.nodes_[(size_t)ib].needs_grad) {
        auto pd = g.grad_buf(ib).data<S>();
        for (int64_t o = 0; o < outer; ++o) {
          const S* src = pg.data() + (o * axo + axa) * inner;
          S* dst = pd.data() + o * axb * inner;
          for (int64_t j = 0; j < axb * inner; ++j) dst[j] += src[j];
        }
      }
      return 0;
    });
  })};
}

Var Graph::broadcast_rows(Var v, int64_t rows) {
  const Tensor& tv = value(v);
  require(tv.rank() == 1 && rows > 0, "broadcast_rows: need rank-1 input");
  int64_t d = tv.dim(0);
  Tensor out = Tensor::zeros({rows, d}, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pv = tv.data<S>();
    auto po = out.data<S>();
    for (int64_t r = 0; r < rows; ++r) std::copy_n(pv.data(), d, po.data() + r * d);
    return 0;
  });
  int32_t iv = v.id;
  return Var{push(std::move(out), needs(v), [iv, rows, d](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>();
      auto pd = g.grad_buf(iv).data<S>();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) pd[j] += pg[r * d + j];
      return 0;
    });
  })};
}

Var Graph::embedding(Var table, std::vector<int64_t> ids) {
  const Tensor& tt = value(table);
  require(tt.rank() == 2, "embedding: table must be [V,d]");
  int64_t V = tt.dim(0), d = tt.dim(1);
  for (int64_t id : ids)
    if (id < 0 || id >= V)
      throw IndexError("embedding: token id " + std::to_string(id) + " out of vocab " +
                       std::to_string(V));
  int64_t n = static_cast<int64_t>(ids.size());
  Tensor out = Tensor::zeros({n, d}, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto pt = tt.data<S>();
    auto po = out.data<S>();
    for (int64_t i = 0; i < n; ++i)
      std::copy_n(pt.data() + ids[(size_t)i] * d, d, po.data() + i * d);
    return 0;
  });
  int32_t it = table.id;
  std::vector<int64_t> ids_c = std::move(ids);
  return Var{push(std::move(out), needs(table), [it, ids_c, d](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>();
      auto pd = g.grad_buf(it).data<S>();
      for (size_t i = 0; i < ids_c.size(); ++i) {
        const S* src = pg.data() + static_cast<int64_t>(i) * d;
        S* dst = pd.data() + ids_c[i] * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
      return 0;
    });
  })};
}

Var Graph::gather_rows0(Var x, std::vector<int64_t> idx) {
  const Tensor& tx = value(x);
  require(tx.rank() >= 1, "gather_rows0: rank must be >= 1");
  int64_t B = tx.dim(0);
  int64_t inner = tx.numel() / B;
  for (int64_t i : idx)
    if (i < 0 || i >= B)
      throw IndexError("gather_rows0: index " + std::to_string(i) + " out of " + std::to_string(B));
  int64_t m = static_cast<int64_t>(idx.size());
  Shape os = tx.shape();
  os[0] = m;
  Tensor out = Tensor::zeros(os, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    auto px = tx.data<S>();
    auto po = out.data<S>();
    for (int64_t i = 0; i < m; ++i)
      std::copy_n(px.data() + idx[(size_t)i] * inner, inner, po.data() + i * inner);
    return 0;
  });
  int32_t ix = x.id;
  std::vector<int64_t> idx_c = std::move(idx);
  return Var{push(std::move(out), needs(x), [ix, idx_c, inner](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      auto pg = G.data<S>();
      auto pd = g.grad_buf(ix).data<S>();
      for (size_t i = 0; i < idx_c.size(); ++i) {
        const S* src = pg.data() + static_cast<int64_t>(i) * inner;
        S* dst = pd.data() + idx_c[i] * inner;
        for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
      }
      return 0;
    });
  })};
}

Var Graph::div_by_scalar(Var x, Var denom) {
  const Tensor& tx = value(x);
  const Tensor& td = value(denom);
  require(td.numel() == 1, "div_by_scalar: denominator must be scalar");
  double dv = td.at(0);
  Tensor out = tx;
  out.set_requires_grad(false);
  out.drop_grad();
  out.scale_inplace(1.0 / dv);
  bool ng = needs(x) || needs(denom);
  int32_t ix = x.id, id_ = denom.id;
  return Var{push(std::move(out), ng, [ix, id_, dv](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    if (g.nodes_[(size_t)ix].needs_grad) g.grad_buf(ix).add_scaled(G, 1.0 / dv);
    if (g.nodes_[(size_t)id_].needs_grad) {
      const Tensor& X = g.nodes_[(size_t)ix].value;
      double acc = 0.0;
      for (int64_t i = 0; i < X.numel(); ++i) acc += G.at(i) * X.at(i);
      Tensor& dd = g.grad_buf(id_);
      dd.set(0, dd.at(0) - acc / (dv * dv));
    }
  })};
}

namespace {

// dir=+1: [B,L,h*dh] -> [B*h,L,dh]; dir=-1 is the inverse mapping.
template <class S>
void heads_shuffle(const S* src, S* dst, int64_t B, int64_t L, int64_t h, int64_t dh,
                   bool split, bool add) {
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < h; ++i)
      for (int64_t l = 0; l < L; ++l) {
        const int64_t merged = (b * L + l) * (h * dh) + i * dh;
        const int64_t splitp = ((b * h + i) * L + l) * dh;
        int64_t from = split ? merged : splitp;
        int64_t to = split ? splitp : merged;
        if (add)
          for (int64_t j = 0; j < dh; ++j) dst[to + j] += src[from + j];
        else
          for (int64_t j = 0; j < dh; ++j) dst[to + j] = src[from + j];
      }
}

}  // namespace

Var Graph::split_heads(Var x, int64_t heads) {
  const Tensor& tx = value(x);
  require(tx.rank() == 3 && tx.dim(2) % heads == 0,
          "split_heads: " + shape_str(tx.shape()) + " with " + std::to_string(heads) + " heads");
  int64_t B = tx.dim(0), L = tx.dim(1), dh = tx.dim(2) / heads;
  Tensor out = Tensor::zeros({B * heads, L, dh}, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    heads_shuffle<S>(tx.data<S>().data(), out.data<S>().data(), B, L, heads, dh, true, false);
    return 0;
  });
  int32_t ix = x.id;
  return Var{push(std::move(out), needs(x), [ix, B, L, heads, dh](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    Tensor& dx = g.grad_buf(ix);
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      heads_shuffle<S>(G.data<S>().data(), dx.data<S>().data(), B, L, heads, dh, false, true);
      return 0;
    });
  })};
}

Var Graph::merge_heads(Var x, int64_t heads) {
  const Tensor& tx = value(x);
  require(tx.rank() == 3 && tx.dim(0) % heads == 0,
          "merge_heads: " + shape_str(tx.shape()) + " with " + std::to_string(heads) + " heads");
  int64_t B = tx.dim(0) / heads, L = tx.dim(1), dh = tx.dim(2);
  Tensor out = Tensor::zeros({B, L, heads * dh}, mode_);
  with_dtype(mode_, [&](auto s) {
    using S = decltype(s);
    heads_shuffle<S>(tx.data<S>().data(), out.data<S>().data(), B, L, heads, dh, false, false);
    return 0;
  });
  int32_t ix = x.id;
  return Var{push(std::move(out), needs(x), [ix, B, L, heads, dh](Graph& g, int32_t self) {
    const Tensor& G = g.nodes_[(size_t)self].grad;
    Tensor& dx = g.grad_buf(ix);
    with_dtype(g.mode_, [&](auto s) {
      using S = decltype(s);
      heads_shuffle<S>(G.data<S>().data(), dx.data<S>().data(), B, L, heads, dh, true, true);
      return 0;
    });
  })};
}

Var Graph::detach(Var x) {
  Tensor v = value(x);
  v.set_requires_grad(false);
  v.drop_grad();
  return constant(std::move(v));
}

}  // namespace medlab
