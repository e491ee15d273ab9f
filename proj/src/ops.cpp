#include "utixvec/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <string>
#include <utility>

#include "utixvec/errors.hpp"

namespace utixvec {

namespace {

template <typename T>
using Node = detail::TensorNode<T>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

// Builds the result node of an op. Operands are recorded as parents (in the
// given order, undefined ones skipped) only when recording is on and at least
// one operand needs a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> operands,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);

  if (finite_checks() && !all_finite<T>(node->data)) {
    bool inputs_finite = true;
    for (const auto* t : operands) {
      if (t->defined() && !all_finite(t->data())) inputs_finite = false;
    }
    if (inputs_finite) {
      throw NumericalError(std::string(op) + " produced a non-finite value from finite inputs");
    }
  }

  bool needs_grad = false;
  for (const auto* t : operands) {
    if (t->defined() && t->requires_grad()) needs_grad = true;
  }
  if (needs_grad && grad_enabled()) {
    node->requires_grad = true;
    for (const auto* t : operands) {
      if (t->defined()) node->parents.push_back(t->node());
    }
    node->backward = std::move(backward_fn);
  }
  return Tensor<T>::from_node(std::move(node));
}

void require_rank(const char* op, const char* what, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got " + shape_string(shape));
  }
}

struct ConvGeometry {
  std::size_t n, t, h, w, cin;
  std::size_t kt, kh, kw, cout;
  std::size_t ot, oh, ow;
  Dims3 stride, dilation;

  std::size_t rows() const { return ot * oh * ow; }
  std::size_t patch() const { return kt * kh * kw * cin; }
  std::size_t input_sample() const { return t * h * w * cin; }
};

ConvGeometry conv_geometry(const Shape& in, const Shape& k, const Conv3dOptions& opt) {
  require_rank("conv3d", "input", in, 5);
  require_rank("conv3d", "kernel", k, 5);
  if (in[4] != k[3]) {
    throw DimensionError("conv3d: kernel " + shape_string(k) + " expects " + std::to_string(k[3]) +
                         " input channels but input " + shape_string(in) + " has " +
                         std::to_string(in[4]));
  }
  for (std::size_t a = 0; a < 3; ++a) {
    if (opt.strides[a] < 1 || opt.dilation[a] < 1) {
      throw DimensionError("conv3d: strides and dilation must be >= 1");
    }
    const auto span = opt.dilation[a] * (k[a] - 1) + 1;
    if (k[a] < 1 || span > in[a + 1]) {
      throw DimensionError("conv3d: kernel " + shape_string(k) + " does not fit input " +
                           shape_string(in));
    }
  }
  ConvGeometry g{};
  g.n = in[0];
  g.t = in[1];
  g.h = in[2];
  g.w = in[3];
  g.cin = in[4];
  g.kt = k[0];
  g.kh = k[1];
  g.kw = k[2];
  g.cout = k[4];
  g.stride = opt.strides;
  g.dilation = opt.dilation;
  g.ot = conv_output_extent(g.t, g.kt, g.stride[0], g.dilation[0]);
  g.oh = conv_output_extent(g.h, g.kh, g.stride[1], g.dilation[1]);
  g.ow = conv_output_extent(g.w, g.kw, g.stride[2], g.dilation[2]);
  return g;
}

// Gathers every receptive-field patch of one sample into a [rows, patch] matrix.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* cols) {
  const std::size_t patch = g.patch();
  std::size_t row = 0;
  for (std::size_t ot = 0; ot < g.ot; ++ot) {
    for (std::size_t oh = 0; oh < g.oh; ++oh) {
      for (std::size_t ow = 0; ow < g.ow; ++ow, ++row) {
        T* dst = cols + row * patch;
        for (std::size_t a = 0; a < g.kt; ++a) {
          const std::size_t ti = ot * g.stride[0] + a * g.dilation[0];
          for (std::size_t b = 0; b < g.kh; ++b) {
            const std::size_t hi = oh * g.stride[1] + b * g.dilation[1];
            const T* row_in = in + ((ti * g.h + hi) * g.w + ow * g.stride[2]) * g.cin;
            if (g.dilation[2] == 1) {
              std::copy_n(row_in, g.kw * g.cin, dst);
              dst += g.kw * g.cin;
              continue;
            }
            for (std::size_t c = 0; c < g.kw; ++c) {
              std::copy_n(row_in + c * g.dilation[2] * g.cin, g.cin, dst);
              dst += g.cin;
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* in_grad) {
  const std::size_t patch = g.patch();
  std::size_t row = 0;
  for (std::size_t ot = 0; ot < g.ot; ++ot) {
    for (std::size_t oh = 0; oh < g.oh; ++oh) {
      for (std::size_t ow = 0; ow < g.ow; ++ow, ++row) {
        const T* src = cols + row * patch;
        for (std::size_t a = 0; a < g.kt; ++a) {
          const std::size_t ti = ot * g.stride[0] + a * g.dilation[0];
          for (std::size_t b = 0; b < g.kh; ++b) {
            const std::size_t hi = oh * g.stride[1] + b * g.dilation[1];
            T* row_grad = in_grad + ((ti * g.h + hi) * g.w + ow * g.stride[2]) * g.cin;
            if (g.dilation[2] == 1) {
              for (std::size_t i = 0; i < g.kw * g.cin; ++i) row_grad[i] += src[i];
              src += g.kw * g.cin;
              continue;
            }
            for (std::size_t c = 0; c < g.kw; ++c) {
              T* dst = row_grad + c * g.dilation[2] * g.cin;
              for (std::size_t ci = 0; ci < g.cin; ++ci) dst[ci] += src[ci];
              src += g.cin;
            }
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride,
                               std::size_t dilation) {
  const std::size_t span = dilation * (kernel - 1) + 1;
  if (stride == 0 || span > input) return 0;
  return (input - span) / stride + 1;
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const Conv3dOptions& options) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), options);
  if (bias.defined() && bias.shape() != Shape{g.cout}) {
    throw DimensionError("conv3d: bias " + shape_string(bias.shape()) + " does not match " +
                         std::to_string(g.cout) + " output channels");
  }
  const std::size_t rows = g.rows();
  const std::size_t patch = g.patch();
  std::vector<T> out(g.n * rows * g.cout);
  std::vector<T> cols(rows * patch);

  Eigen::Map<const RowMat<T>> kmat(kernel.data().data(), patch, g.cout);
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(input.data().data() + n * g.input_sample(), g, cols.data());
    Eigen::Map<const RowMat<T>> cmat(cols.data(), rows, patch);
    Eigen::Map<RowMat<T>> omat(out.data() + n * rows * g.cout, rows, g.cout);
    omat.noalias() = cmat * kmat;
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data().data(), g.cout);
      omat.rowwise() += b;
    }
  }

  const bool has_bias = bias.defined();
  return make_result<T>(
      "conv3d", Shape{g.n, g.ot, g.oh, g.ow, g.cout}, std::move(out), {&input, &kernel, &bias},
      [g, has_bias](Node<T>& self) {
        auto& in_node = *self.parents[0];
        auto& k_node = *self.parents[1];
        const std::size_t rows = g.rows();
        const std::size_t patch = g.patch();
        Eigen::Map<const RowMat<T>> kmat(k_node.data.data(), patch, g.cout);
        std::vector<T> cols(rows * patch);
        std::vector<T> dcols;
        for (std::size_t n = 0; n < g.n; ++n) {
          Eigen::Map<const RowMat<T>> gmat(self.grad.data() + n * rows * g.cout, rows, g.cout);
          if (k_node.requires_grad) {
            im2col(in_node.data.data() + n * g.input_sample(), g, cols.data());
            Eigen::Map<const RowMat<T>> cmat(cols.data(), rows, patch);
            Eigen::Map<RowMat<T>> dk(k_node.ensure_grad().data(), patch, g.cout);
            dk.noalias() += cmat.transpose() * gmat;
          }
          if (in_node.requires_grad) {
            dcols.resize(rows * patch);
            Eigen::Map<RowMat<T>> dc(dcols.data(), rows, patch);
            dc.noalias() = gmat * kmat.transpose();
            col2im_add(dcols.data(), g, in_node.ensure_grad().data() + n * g.input_sample());
          }
          if (has_bias && self.parents[2]->requires_grad) {
            auto& db = self.parents[2]->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
              const T* gr = self.grad.data() + (n * rows + r) * g.cout;
              for (std::size_t c = 0; c < g.cout; ++c) db[c] += gr[c];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv2plus1d(const Tensor<T>& input, const Tensor<T>& spatial_kernel,
                      const Tensor<T>& temporal_kernel, const Tensor<T>& bias,
                      const Conv3dOptions& options) {
  const auto& sk = spatial_kernel.shape();
  const auto& tk = temporal_kernel.shape();
  require_rank("conv2plus1d", "spatial kernel", sk, 5);
  require_rank("conv2plus1d", "temporal kernel", tk, 5);
  if (sk[0] != 1) {
    throw DimensionError("conv2plus1d: spatial kernel " + shape_string(sk) +
                         " must have temporal extent 1");
  }
  if (tk[1] != 1 || tk[2] != 1) {
    throw DimensionError("conv2plus1d: temporal kernel " + shape_string(tk) +
                         " must have spatial extent 1x1");
  }
  if (sk[4] != tk[3]) {
    throw DimensionError("conv2plus1d: spatial kernel " + shape_string(sk) + " emits " +
                         std::to_string(sk[4]) + " channels but temporal kernel " +
                         shape_string(tk) + " expects " + std::to_string(tk[3]));
  }
  Conv3dOptions spatial{{1, options.strides[1], options.strides[2]},
                        {1, options.dilation[1], options.dilation[2]}};
  Conv3dOptions temporal{{options.strides[0], 1, 1}, {options.dilation[0], 1, 1}};
  return conv3d(conv3d(input, spatial_kernel, Tensor<T>{}, spatial), temporal_kernel, bias,
                temporal);
}

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& input, const Dims3& window) {
  const auto& s = input.shape();
  require_rank("maxpool3d", "input", s, 5);
  for (std::size_t a = 0; a < 3; ++a) {
    if (window[a] < 1 || window[a] > s[a + 1]) {
      throw DimensionError("maxpool3d: window (" + std::to_string(window[0]) + "," +
                           std::to_string(window[1]) + "," + std::to_string(window[2]) +
                           ") does not fit input " + shape_string(s));
    }
  }
  const std::size_t n = s[0], t = s[1], h = s[2], w = s[3], c = s[4];
  const std::size_t ot = t / window[0], oh = h / window[1], ow = w / window[2];
  const std::size_t out_n = n * ot * oh * ow * c;
  std::vector<T> out(out_n);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out_n);
  const T* x = input.data().data();

  std::size_t o = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < ot; ++i) {
      for (std::size_t j = 0; j < oh; ++j) {
        for (std::size_t k = 0; k < ow; ++k) {
          for (std::size_t ch = 0; ch < c; ++ch, ++o) {
            std::size_t best = 0;
            bool first = true;
            for (std::size_t a = 0; a < window[0]; ++a) {
              for (std::size_t bb = 0; bb < window[1]; ++bb) {
                for (std::size_t cc = 0; cc < window[2]; ++cc) {
                  const std::size_t idx =
                      ((((b * t + i * window[0] + a) * h + j * window[1] + bb) * w +
                        k * window[2] + cc) *
                       c) +
                      ch;
                  if (first || x[idx] > x[best]) {
                    best = idx;
                    first = false;
                  }
                }
              }
            }
            (*argmax)[o] = best;
            out[o] = x[best];
          }
        }
      }
    }
  }

  return make_result<T>("maxpool3d", Shape{n, ot, oh, ow, c}, std::move(out), {&input},
                        [argmax](Node<T>& self) {
                          auto& gin = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < argmax->size(); ++i) {
                            gin[(*argmax)[i]] += self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  const auto& s = input.shape();
  require_rank("dense", "weight", weight.shape(), 2);
  const std::size_t din = weight.dim(0), dout = weight.dim(1);
  if (s.empty() || s.back() != din) {
    throw DimensionError("dense: input " + shape_string(s) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{dout}) {
    throw DimensionError("dense: bias " + shape_string(bias.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t m = din == 0 ? 0 : input.numel() / din;
  Shape out_shape = s;
  out_shape.back() = dout;
  std::vector<T> out(m * dout);
  Eigen::Map<const RowMat<T>> x(input.data().data(), m, din);
  Eigen::Map<const RowMat<T>> wm(weight.data().data(), din, dout);
  Eigen::Map<RowMat<T>> y(out.data(), m, dout);
  y.noalias() = x * wm;
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data().data(), dout);
    y.rowwise() += b;
  }
  const bool has_bias = bias.defined();
  return make_result<T>(
      "dense", std::move(out_shape), std::move(out), {&input, &weight, &bias},
      [m, din, dout, has_bias](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        Eigen::Map<const RowMat<T>> g(self.grad.data(), m, dout);
        if (xn.requires_grad) {
          Eigen::Map<const RowMat<T>> wm(wn.data.data(), din, dout);
          Eigen::Map<RowMat<T>> dx(xn.ensure_grad().data(), m, din);
          dx.noalias() += g * wm.transpose();
        }
        if (wn.requires_grad) {
          Eigen::Map<const RowMat<T>> x(xn.data.data(), m, din);
          Eigen::Map<RowMat<T>> dw(wn.ensure_grad().data(), din, dout);
          dw.noalias() += x.transpose() * g;
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& db = self.parents[2]->ensure_grad();
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < dout; ++c) db[c] += self.grad[r * dout + c];
          }
        }
      });
}

template <typename T>
Tensor<T> swish(const Tensor<T>& x) {
  auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = xs[i] * sigmoid(xs[i]);
  return make_result<T>("swish", x.shape(), std::move(out), {&x}, [](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gx = xn.ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      const T s = sigmoid(xn.data[i]);
      const T f = self.data[i];
      gx[i] += self.grad[i] * (f + s * (T(1) - f));
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  auto as = a.data(), bs = b.data();
  std::vector<T> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] + bs[i];
  return make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  auto as = a.data(), bs = b.data();
  std::vector<T> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] * bs[i];
  return make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    // Read both operands before writing: a and b may be the same node.
    std::vector<T> ga(self.grad.size()), gb(self.grad.size());
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] = self.grad[i] * bn.data[i];
      gb[i] = self.grad[i] * an.data[i];
    }
    if (an.requires_grad) {
      auto& g = an.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += ga[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gb[i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  return make_result<T>("sum", Shape{}, std::vector<T>{static_cast<T>(acc)}, {&x},
                        [](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (auto& v : g) v += self.grad[0];
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  auto xs = x.data();
  return make_result<T>("reshape", std::move(shape), std::vector<T>(xs.begin(), xs.end()), {&x},
                        [](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> mean_over_axis(const Tensor<T>& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) {
    throw IndexError("mean_over_axis: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(s));
  }
  const std::size_t m = s[axis];
  if (m == 0) throw DimensionError("mean_over_axis: empty axis in " + shape_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  auto xs = x.data();
  std::vector<T> out(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o) {
    T* dst = out.data() + o * inner;
    for (std::size_t j = 0; j < m; ++j) {
      const T* src = xs.data() + (o * m + j) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
    for (std::size_t i = 0; i < inner; ++i) dst[i] /= static_cast<T>(m);
  }
  return make_result<T>("mean_over_axis", std::move(out_shape), std::move(out), {&x},
                        [outer, m, inner](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          const T scale = T(1) / static_cast<T>(m);
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t j = 0; j < m; ++j) {
                              T* dst = g.data() + (o * m + j) * inner;
                              const T* src = self.grad.data() + o * inner;
                              for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * scale;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = !sa.empty() && sa.size() == sb.size();
  for (std::size_t i = 0; ok && i + 1 < sa.size(); ++i) ok = sa[i] == sb[i];
  if (!ok) {
    throw DimensionError("concat: shapes " + shape_string(sa) + " and " + shape_string(sb) +
                         " differ outside the last axis");
  }
  const std::size_t da = sa.back(), db = sb.back();
  const std::size_t rows = shape_numel(sa) / std::max<std::size_t>(da, 1);
  const std::size_t rows_b = shape_numel(sb) / std::max<std::size_t>(db, 1);
  const std::size_t lead = da > 0 ? rows : rows_b;
  Shape out_shape = sa;
  out_shape.back() = da + db;
  std::vector<T> out(lead * (da + db));
  auto as = a.data(), bs = b.data();
  for (std::size_t r = 0; r < lead; ++r) {
    std::copy_n(as.data() + r * da, da, out.data() + r * (da + db));
    std::copy_n(bs.data() + r * db, db, out.data() + r * (da + db) + da);
  }
  return make_result<T>("concat", std::move(out_shape), std::move(out), {&a, &b},
                        [lead, da, db](Node<T>& self) {
                          auto& an = *self.parents[0];
                          auto& bn = *self.parents[1];
                          if (an.requires_grad) {
                            auto& g = an.ensure_grad();
                            for (std::size_t r = 0; r < lead; ++r) {
                              for (std::size_t i = 0; i < da; ++i) {
                                g[r * da + i] += self.grad[r * (da + db) + i];
                              }
                            }
                          }
                          if (bn.requires_grad) {
                            auto& g = bn.ensure_grad();
                            for (std::size_t r = 0; r < lead; ++r) {
                              for (std::size_t i = 0; i < db; ++i) {
                                g[r * db + i] += self.grad[r * (da + db) + da + i];
                              }
                            }
                          }
                        });
}

template <typename T>
SoftmaxXent<T> softmax_xent(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  const auto& s = logits.shape();
  require_rank("softmax_xent", "logits", s, 2);
  const std::size_t n = s[0], k = s[1];
  if (labels.size() != n) {
    throw DimensionError("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  for (auto y : labels) {
    if (y >= k) {
      throw IndexError("softmax_xent: label " + std::to_string(y) + " outside [0," +
                       std::to_string(k) + ")");
    }
  }
  auto z = logits.data();
  std::vector<T> probs(n * k);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = z.data() + r * k;
    const T mx = *std::max_element(row, row + k);
    T denom = T(0);
    for (std::size_t c = 0; c < k; ++c) {
      probs[r * k + c] = std::exp(row[c] - mx);
      denom += probs[r * k + c];
    }
    for (std::size_t c = 0; c < k; ++c) probs[r * k + c] /= denom;
    total += static_cast<double>(std::log(denom) - (row[labels[r]] - mx));
  }
  const T loss_value = static_cast<T>(total / static_cast<double>(n));

  auto shared_probs = std::make_shared<std::vector<T>>(probs);
  std::vector<std::size_t> label_copy(labels.begin(), labels.end());
  SoftmaxXent<T> result;
  result.probabilities = Tensor<T>(Shape{n, k}, std::move(probs));
  result.loss = make_result<T>(
      "softmax_xent", Shape{}, std::vector<T>{loss_value}, {&logits},
      [shared_probs, label_copy, n, k](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const T scale = self.grad[0] / static_cast<T>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < k; ++c) {
            const T onehot = c == label_copy[r] ? T(1) : T(0);
            g[r * k + c] += scale * ((*shared_probs)[r * k + c] - onehot);
          }
        }
      });
  return result;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const auto& s = logits.shape();
  require_rank("softmax", "logits", s, 2);
  const std::size_t n = s[0], k = s[1];
  auto z = logits.data();
  std::vector<T> probs(n * k);
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = z.data() + r * k;
    const T mx = *std::max_element(row, row + k);
    T denom = T(0);
    for (std::size_t c = 0; c < k; ++c) {
      probs[r * k + c] = std::exp(row[c] - mx);
      denom += probs[r * k + c];
    }
    for (std::size_t c = 0; c < k; ++c) probs[r * k + c] /= denom;
  }
  return Tensor<T>(Shape{n, k}, std::move(probs));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse: prediction " + shape_string(pred.shape()) + " vs target " +
                         shape_string(target.shape()));
  }
  auto p = pred.data(), t = target.data();
  if (p.empty()) throw DimensionError("mse: empty operands");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    acc += d * d;
  }
  const std::size_t count = p.size();
  return make_result<T>(
      "mse", Shape{}, std::vector<T>{static_cast<T>(acc / static_cast<double>(count))},
      {&pred, &target}, [count](Node<T>& self) {
        auto& pn = *self.parents[0];
        auto& tn = *self.parents[1];
        const T scale = T(2) * self.grad[0] / static_cast<T>(count);
        std::vector<T> diff(count);
        for (std::size_t i = 0; i < count; ++i) diff[i] = scale * (pn.data[i] - tn.data[i]);
        if (pn.requires_grad) {
          auto& g = pn.ensure_grad();
          for (std::size_t i = 0; i < count; ++i) g[i] += diff[i];
        }
        if (tn.requires_grad) {
          auto& g = tn.ensure_grad();
          for (std::size_t i = 0; i < count; ++i) g[i] -= diff[i];
        }
      });
}

#define UTIXVEC_INSTANTIATE_OPS(T)                                                              \
  template T sigmoid<T>(T);                                                                     \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                               const Conv3dOptions&);                                           \
  template Tensor<T> conv2plus1d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                    const Tensor<T>&, const Conv3dOptions&);                    \
  template Tensor<T> maxpool3d<T>(const Tensor<T>&, const Dims3&);                             \
  template Tensor<T> dense<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> swish<T>(const Tensor<T>&);                                               \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                 \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                      \
  template Tensor<T> mean_over_axis<T>(const Tensor<T>&, std::size_t);                         \
  template Tensor<T> concat_last<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template SoftmaxXent<T> softmax_xent<T>(const Tensor<T>&, std::span<const std::size_t>);     \
  template Tensor<T> mse<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);

UTIXVEC_INSTANTIATE_OPS(float)
UTIXVEC_INSTANTIATE_OPS(double)

#undef UTIXVEC_INSTANTIATE_OPS

}  // namespace utixvec
