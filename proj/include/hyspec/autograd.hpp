#pragma once

// Reverse-mode tape over row-major matrices. Rows are time steps; a batch of
// equal-length sequences is stacked, and the sequence-aware ops (rope,
// causal_attention, recurrence_scan) take the per-sequence length.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "hyspec/numerics.hpp"
#include "hyspec/weights.hpp"

namespace hyspec {

class Tape {
 public:
  struct Var {
    int id = -1;
  };

  /// Parameter leaf: reads `value` in place, accumulates into `grad` (may be null).
  Var leaf(const Mat& value, Mat* grad) {
    Node n;
    n.ext = &value;
    n.ext_grad = grad;
    return push(std::move(n));
  }

  Var constant(Mat value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  [[nodiscard]] const Mat& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.ext ? *n.ext : n.value;
  }

  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Seed d(loss)/d(loss) = 1 and run every recorded backward closure.
  void backward(Var loss) {
    require(value(loss).size() == 1, "backward: loss must be a scalar");
    grad(loss) = Mat::Ones(1, 1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.grad.size() > 0) n.back();
    }
    for (auto& n : nodes_) {
      if (n.ext_grad && n.grad.size() > 0) *n.ext_grad += n.grad;
    }
  }

  // ---- ops ---------------------------------------------------------------

  Var matmul(Var x, Var w) {
    Var y = make(value(x) * value(w));
    on_back(y, [this, x, w, y] {
      const Mat& gy = grad_ref(y);
      if (wants(x)) grad(x).noalias() += gy * value(w).transpose();
      if (wants(w)) grad(w).noalias() += value(x).transpose() * gy;
    });
    return y;
  }

  Var add(Var a, Var b) {
    Var y = make(value(a) + value(b));
    on_back(y, [this, a, b, y] {
      if (wants(a)) grad(a) += grad_ref(y);
      if (wants(b)) grad(b) += grad_ref(y);
    });
    return y;
  }

  Var mul(Var a, Var b) {
    Var y = make(value(a).cwiseProduct(value(b)));
    on_back(y, [this, a, b, y] {
      if (wants(a)) grad(a) += grad_ref(y).cwiseProduct(value(b));
      if (wants(b)) grad(b) += grad_ref(y).cwiseProduct(value(a));
    });
    return y;
  }

  Var silu(Var a) {
    const Mat& x = value(a);
    Mat out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) out.data()[i] = hyspec::silu(x.data()[i]);
    Var y = make(std::move(out));
    on_back(y, [this, a, y] {
      const Mat& x = value(a);
      const Mat& gy = grad_ref(y);
      Mat& gx = grad(a);
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double s = sigmoid(x.data()[i]);
        gx.data()[i] += gy.data()[i] * s * (1.0 + x.data()[i] * (1.0 - s));
      }
    });
    return y;
  }

  /// Row-wise x / sqrt(mean(x^2) + eps) * gain, gain is 1 x d.
  Var rms_norm(Var xv, Var gv, double eps) {
    const Mat& x = value(xv);
    const Mat& g = value(gv);
    const Eigen::Index R = x.rows(), d = x.cols();
    Mat out(R, d);
    Eigen::VectorXd inv(R);
    for (Eigen::Index r = 0; r < R; ++r) {
      const double ms = x.row(r).squaredNorm() / static_cast<double>(d);
      const double denom = std::sqrt(ms + eps);
      inv(r) = denom == 0.0 ? 0.0 : 1.0 / denom;
      for (Eigen::Index j = 0; j < d; ++j) out(r, j) = x(r, j) * inv(r) * g(0, j);
    }
    Var y = make(std::move(out));
    on_back(y, [this, xv, gv, y, inv, eps] {
      (void)eps;
      const Mat& x = value(xv);
      const Mat& g = value(gv);
      const Mat& gy = grad_ref(y);
      const Eigen::Index R = x.rows(), d = x.cols();
      const bool want_x = wants(xv), want_g = wants(gv);
      for (Eigen::Index r = 0; r < R; ++r) {
        const double ri = inv(r);
        if (want_g) grad(gv).row(0) += (gy.row(r).array() * x.row(r).array() * ri).matrix();
        if (want_x) {
          const Eigen::RowVectorXd a = (gy.row(r).array() * g.row(0).array()).matrix();
          const double ax = a.dot(x.row(r));
          grad(xv).row(r) += ri * a - (ri * ri * ri * ax / static_cast<double>(d)) * x.row(r);
        }
      }
    });
    return y;
  }

  Var embed(Var table, std::span<const Token> tokens) {
    const Mat& E = value(table);
    Mat out(static_cast<Eigen::Index>(tokens.size()), E.cols());
    for (std::size_t t = 0; t < tokens.size(); ++t) out.row(static_cast<Eigen::Index>(t)) = E.row(tokens[t]);
    Var y = make(std::move(out));
    std::vector<Token> toks(tokens.begin(), tokens.end());
    on_back(y, [this, table, y, toks] {
      if (!wants(table)) return;
      Mat& gE = grad(table);
      const Mat& gy = grad_ref(y);
      for (std::size_t t = 0; t < toks.size(); ++t) gE.row(toks[t]) += gy.row(static_cast<Eigen::Index>(t));
    });
    return y;
  }

  /// Rotary embedding; row r sits at position r % seq_len.
  Var rope(Var xv, int n_heads, int head_dim, int seq_len, double base) {
    const Mat& x = value(xv);
    const Eigen::Index R = x.rows();
    Mat cosv(seq_len, head_dim / 2), sinv(seq_len, head_dim / 2);
    for (int p = 0; p < seq_len; ++p)
      for (int i = 0; i < head_dim / 2; ++i) {
        const double theta = p * std::pow(base, -2.0 * i / head_dim);
        cosv(p, i) = std::cos(theta);
        sinv(p, i) = std::sin(theta);
      }
    Mat out = x;
    for (Eigen::Index r = 0; r < R; ++r) {
      const int p = static_cast<int>(r % seq_len);
      for (int h = 0; h < n_heads; ++h)
        for (int i = 0; i < head_dim / 2; ++i) {
          const Eigen::Index c0 = h * head_dim + 2 * i;
          const double a = x(r, c0), b = x(r, c0 + 1);
          out(r, c0) = a * cosv(p, i) - b * sinv(p, i);
          out(r, c0 + 1) = a * sinv(p, i) + b * cosv(p, i);
        }
    }
    Var y = make(std::move(out));
    on_back(y, [this, xv, y, cosv, sinv, n_heads, head_dim, seq_len] {
      if (!wants(xv)) return;
      const Mat& gy = grad_ref(y);
      Mat& gx = grad(xv);
      for (Eigen::Index r = 0; r < gy.rows(); ++r) {
        const int p = static_cast<int>(r % seq_len);
        for (int h = 0; h < n_heads; ++h)
          for (int i = 0; i < head_dim / 2; ++i) {
            const Eigen::Index c0 = h * head_dim + 2 * i;
            const double g0 = gy(r, c0), g1 = gy(r, c0 + 1);
            gx(r, c0) += g0 * cosv(p, i) + g1 * sinv(p, i);
            gx(r, c0 + 1) += -g0 * sinv(p, i) + g1 * cosv(p, i);
          }
      }
    });
    return y;
  }

  /// Multi-head causal softmax attention within each sequence segment.
  Var causal_attention(Var qv, Var kv, Var vv, int n_heads, int seq_len) {
    const Mat& Q = value(qv);
    const Mat& K = value(kv);
    const Mat& V = value(vv);
    const Eigen::Index R = Q.rows(), d = Q.cols();
    const int hd = static_cast<int>(d) / n_heads;
    const Eigen::Index n_seq = R / seq_len;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    auto probs = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(n_seq * n_heads));
    Mat out = Mat::Zero(R, d);
    for (Eigen::Index s = 0; s < n_seq; ++s)
      for (int h = 0; h < n_heads; ++h) {
        const auto q = Q.block(s * seq_len, h * hd, seq_len, hd);
        const auto k = K.block(s * seq_len, h * hd, seq_len, hd);
        const auto v = V.block(s * seq_len, h * hd, seq_len, hd);
        Mat S = (q * k.transpose()) * scale;
        for (int i = 0; i < seq_len; ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int j = 0; j <= i; ++j) mx = std::max(mx, S(i, j));
          double total = 0.0;
          for (int j = 0; j < seq_len; ++j) {
            S(i, j) = j <= i ? std::exp(S(i, j) - mx) : 0.0;
            total += S(i, j);
          }
          S.row(i) /= total;
        }
        out.block(s * seq_len, h * hd, seq_len, hd) = S * v;
        (*probs)[static_cast<std::size_t>(s * n_heads + h)] = std::move(S);
      }
    Var y = make(std::move(out));
    on_back(y, [this, qv, kv, vv, y, probs, n_heads, seq_len, hd, n_seq, scale] {
      const Mat& Q = value(qv);
      const Mat& K = value(kv);
      const Mat& V = value(vv);
      const Mat& gy = grad_ref(y);
      Mat& gq = grad(qv);
      Mat& gk = grad(kv);
      Mat& gv = grad(vv);
      for (Eigen::Index s = 0; s < n_seq; ++s)
        for (int h = 0; h < n_heads; ++h) {
          const Mat& P = (*probs)[static_cast<std::size_t>(s * n_heads + h)];
          const auto go = gy.block(s * seq_len, h * hd, seq_len, hd);
          const auto q = Q.block(s * seq_len, h * hd, seq_len, hd);
          const auto k = K.block(s * seq_len, h * hd, seq_len, hd);
          const auto v = V.block(s * seq_len, h * hd, seq_len, hd);
          const Mat dP = go * v.transpose();
          gv.block(s * seq_len, h * hd, seq_len, hd).noalias() += P.transpose() * go;
          Mat dS = P.cwiseProduct(dP);
          const Eigen::VectorXd rs = dS.rowwise().sum();
          dS -= P.cwiseProduct(rs.replicate(1, seq_len));
          gq.block(s * seq_len, h * hd, seq_len, hd).noalias() += (dS * k) * scale;
          gk.block(s * seq_len, h * hd, seq_len, hd).noalias() += (dS.transpose() * q) * scale;
        }
    });
    return y;
  }

  /// Diagonal linear recurrence per sequence:
  ///   S_t = diag(sigmoid(a)) S_{t-1} + x_t^T B_t,  y_t = S_t C_t^T + skip * x_t
  Var recurrence_scan(Var xv, Var bv, Var cv, Var av, Var dv, int seq_len) {
    const Mat& X = value(xv);
    const Mat& B = value(bv);
    const Mat& C = value(cv);
    const Mat& A = value(av);
    const Mat& D = value(dv);
    const Eigen::Index R = X.rows(), d = X.cols(), n = B.cols();
    const Eigen::Index n_seq = R / seq_len;
    Eigen::ArrayXd decay(d);
    for (Eigen::Index c = 0; c < d; ++c) decay(c) = sigmoid(A(0, c));
    auto states = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(R));
    Mat out(R, d);
    for (Eigen::Index s = 0; s < n_seq; ++s) {
      Mat S = Mat::Zero(d, n);
      for (int t = 0; t < seq_len; ++t) {
        const Eigen::Index r = s * seq_len + t;
        for (Eigen::Index c = 0; c < d; ++c) {
          double y = 0.0;
          for (Eigen::Index i = 0; i < n; ++i) {
            S(c, i) = decay(c) * S(c, i) + X(r, c) * B(r, i);
            y += C(r, i) * S(c, i);
          }
          out(r, c) = y + D(0, c) * X(r, c);
        }
        (*states)[static_cast<std::size_t>(r)] = S;
      }
    }
    Var y = make(std::move(out));
    on_back(y, [this, xv, bv, cv, av, dv, y, states, decay, seq_len, n_seq, d, n] {
      const Mat& X = value(xv);
      const Mat& B = value(bv);
      const Mat& C = value(cv);
      const Mat& D = value(dv);
      const Mat& gy = grad_ref(y);
      Mat gX = Mat::Zero(X.rows(), d), gB = Mat::Zero(X.rows(), n), gC = Mat::Zero(X.rows(), n);
      Eigen::ArrayXd gdecay = Eigen::ArrayXd::Zero(d), gD = Eigen::ArrayXd::Zero(d);
      for (Eigen::Index s = 0; s < n_seq; ++s) {
        Mat G = Mat::Zero(d, n);
        for (int t = seq_len - 1; t >= 0; --t) {
          const Eigen::Index r = s * seq_len + t;
          const Mat& St = (*states)[static_cast<std::size_t>(r)];
          // G <- dL/dS_t = gy_t^T C_t + diag(decay) dL/dS_{t+1}
          G = decay.matrix().asDiagonal() * G;
          G.noalias() += gy.row(r).transpose() * C.row(r);
          gC.row(r).noalias() += gy.row(r) * St;
          gX.row(r).noalias() += (G * B.row(r).transpose()).transpose();
          gB.row(r).noalias() += X.row(r) * G;
          if (t > 0) {
            const Mat& Sp = (*states)[static_cast<std::size_t>(r - 1)];
            gdecay += (G.cwiseProduct(Sp)).rowwise().sum().array();
          }
          gD += gy.row(r).transpose().array() * X.row(r).transpose().array();
          gX.row(r) += (gy.row(r).array() * D.row(0).array()).matrix();
        }
      }
      if (wants(xv)) grad(xv) += gX;
      if (wants(bv)) grad(bv) += gB;
      if (wants(cv)) grad(cv) += gC;
      if (wants(av)) grad(av).row(0) += (gdecay * decay * (1.0 - decay)).matrix().transpose();
      if (wants(dv)) grad(dv).row(0) += gD.matrix().transpose();
    });
    return y;
  }

  /// Mean token cross-entropy of row-wise logits against targets.
  Var cross_entropy(Var lv, std::span<const Token> targets) {
    const Mat& Lg = value(lv);
    const Eigen::Index R = Lg.rows();
    require(static_cast<std::size_t>(R) == targets.size(), "cross_entropy: target count mismatch");
    auto probs = std::make_shared<Mat>(Lg.rows(), Lg.cols());
    double loss = 0.0;
    for (Eigen::Index r = 0; r < R; ++r) {
      const double mx = Lg.row(r).maxCoeff();
      const Eigen::RowVectorXd e = (Lg.row(r).array() - mx).exp().matrix();
      const double total = e.sum();
      probs->row(r) = e / total;
      loss += (mx + std::log(total)) - Lg(r, targets[static_cast<std::size_t>(r)]);
    }
    Mat out(1, 1);
    out(0, 0) = loss / static_cast<double>(R);
    Var y = make(std::move(out));
    std::vector<Token> tg(targets.begin(), targets.end());
    on_back(y, [this, lv, y, probs, tg] {
      if (!wants(lv)) return;
      const double g = grad_ref(y)(0, 0) / static_cast<double>(tg.size());
      Mat& gl = grad(lv);
      for (std::size_t r = 0; r < tg.size(); ++r) {
        gl.row(static_cast<Eigen::Index>(r)) += g * probs->row(static_cast<Eigen::Index>(r));
        gl(static_cast<Eigen::Index>(r), tg[r]) -= g;
      }
    });
    return y;
  }

 private:
  struct Node {
    Mat value;
    const Mat* ext = nullptr;
    Mat grad;
    Mat* ext_grad = nullptr;
    bool requires_grad = false;
    std::function<void()> back;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  Var make(Mat v) {
    Node n;
    n.value = std::move(v);
    return push(std::move(n));
  }

  template <class F>
  void on_back(Var y, F&& f) {
    nodes_[static_cast<std::size_t>(y.id)].back = std::forward<F>(f);
  }

  /// A node needs a gradient if it is a parameter with a sink or an op output.
  [[nodiscard]] bool wants(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.ext ? n.ext_grad != nullptr : static_cast<bool>(n.back);
  }

  Mat& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) {
      const Mat& val = n.ext ? *n.ext : n.value;
      n.grad = Mat::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }
  const Mat& grad_ref(Var v) { return grad(v); }

  std::vector<Node> nodes_;
};

}  // namespace hyspec
