#include "wrim/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace wrim {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
void kaiming_normal(Tensor<Scalar>& t, Index fan, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan)));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
}

// ---------------------------------------------------------------- Conv2d

template <typename Scalar>
Conv2d<Scalar>::Conv2d(Index in_channels, Index out_channels, Index kernel, Index stride, Index pad,
                       bool with_bias, Rng& rng)
    : weight({out_channels, in_channels * kernel * kernel}),
      in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      has_bias_(with_bias) {
  kaiming_normal(weight.value, out_channels * kernel * kernel, rng);
  if (with_bias) bias = Parameter<Scalar>({out_channels});
}

template <typename Scalar>
void Conv2d<Scalar>::im2col(const Scalar* img, Index h, Index w, RowMatrix<Scalar>& col) const {
  const Index ho = out_size(h), wo = out_size(w);
  col.setZero(in_ * kernel_ * kernel_, ho * wo);
  for (Index c = 0; c < in_; ++c) {
    const Scalar* plane = img + c * h * w;
    for (Index ky = 0; ky < kernel_; ++ky) {
      for (Index kx = 0; kx < kernel_; ++kx) {
        Scalar* row = col.row((c * kernel_ + ky) * kernel_ + kx).data();
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= h) continue;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride_ - pad_ + kx;
            if (ix >= 0 && ix < w) row[oy * wo + ox] = plane[iy * w + ix];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void Conv2d<Scalar>::col2im(const RowMatrix<Scalar>& col, Index h, Index w, Scalar* img) const {
  const Index ho = out_size(h), wo = out_size(w);
  for (Index c = 0; c < in_; ++c) {
    Scalar* plane = img + c * h * w;
    for (Index ky = 0; ky < kernel_; ++ky) {
      for (Index kx = 0; kx < kernel_; ++kx) {
        const Scalar* row = col.row((c * kernel_ + ky) * kernel_ + kx).data();
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= h) continue;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride_ - pad_ + kx;
            if (ix >= 0 && ix < w) plane[iy * w + ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::forward(const Tensor<Scalar>& x) {
  require(x.rank() == 4 && x.dim(1) == in_,
          "Conv2d: expected [N," + std::to_string(in_) + ",H,W], got " + shape_string(x.shape()));
  const Index n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const Index ho = out_size(h), wo = out_size(w);
  require(ho > 0 && wo > 0, "Conv2d: input too small " + shape_string(x.shape()));
  input_ = x;
  Tensor<Scalar> y({n, out_, ho, wo});
  const auto wmat = weight.value.matrix();
  const bool pointwise = kernel_ == 1 && stride_ == 1 && pad_ == 0;
  RowMatrix<Scalar> col;
  for (Index i = 0; i < n; ++i) {
    auto out = y.sample(i);
    if (pointwise) {
      out.noalias() = wmat * x.sample(i);
    } else {
      im2col(x.data() + i * in_ * h * w, h, w, col);
      out.noalias() = wmat * col;
    }
    if (has_bias_) out.colwise() += bias.value.values();
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Index n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  Tensor<Scalar> dx(input_.shape());
  auto wmat = weight.value.matrix();
  auto dw = weight.grad.matrix();
  const bool pointwise = kernel_ == 1 && stride_ == 1 && pad_ == 0;
  RowMatrix<Scalar> col, dcol;
  for (Index i = 0; i < n; ++i) {
    const auto g = grad_out.sample(i);
    if (has_bias_) bias.grad.values() += g.rowwise().sum();
    if (pointwise) {
      dw.noalias() += g * input_.sample(i).transpose();
      dx.sample(i).noalias() = wmat.transpose() * g;
    } else {
      im2col(input_.data() + i * in_ * h * w, h, w, col);
      dw.noalias() += g * col.transpose();
      dcol.noalias() = wmat.transpose() * g;
      col2im(dcol, h, w, dx.data() + i * in_ * h * w);
    }
  }
  return dx;
}

template <typename Scalar>
void Conv2d<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  out.push_back({prefix + ".weight", &weight});
  if (has_bias_) out.push_back({prefix + ".bias", &bias});
}

template <typename Scalar>
void Conv2d<Scalar>::cost(const std::string& name, Shape& chw, CostTable& rows) const {
  const Index ho = out_size(chw[1]), wo = out_size(chw[2]);
  LayerCost row{name};
  row.params = weight.value.size() + (has_bias_ ? out_ : 0);
  row.macs = ho * wo * out_ * in_ * kernel_ * kernel_;
  rows.push_back(row);
  chw = {out_, ho, wo};
}

// ---------------------------------------------------------------- BatchNorm

template <typename Scalar>
BatchNorm<Scalar>::BatchNorm(Index channels, bool shift_trainable, Scalar momentum, Scalar eps)
    : weight({channels}),
      bias({channels}, shift_trainable),
      running_mean({channels}, false, true),
      running_var({channels}, false, true),
      channels_(channels),
      momentum_(momentum),
      eps_(eps) {
  weight.value.values().setOnes();
  running_var.value.values().setOnes();
}

template <typename Scalar>
Tensor<Scalar> BatchNorm<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  require(x.rank() >= 2 && x.dim(1) == channels_,
          "BatchNorm: expected channel axis " + std::to_string(channels_) + ", got " + shape_string(x.shape()));
  mode_ = mode;
  const Index n = x.dim(0), c = channels_, s = x.size() / (n * c);
  Tensor<Scalar> y(x.shape());
  xhat_ = Tensor<Scalar>(x.shape());
  inv_std_.resize(c);
  const Scalar count = static_cast<Scalar>(n * s);
  for (Index ch = 0; ch < c; ++ch) {
    Scalar mean, var;
    if (mode == Mode::kTrain) {
      Scalar sum = 0;
      for (Index i = 0; i < n; ++i) sum += x.values().segment((i * c + ch) * s, s).sum();
      mean = sum / count;
      Scalar sq = 0;
      for (Index i = 0; i < n; ++i) {
        sq += (x.values().segment((i * c + ch) * s, s).array() - mean).square().sum();
      }
      var = sq / count;
      const Scalar unbiased = count > 1 ? var * count / (count - 1) : var;
      running_mean.value[ch] = (1 - momentum_) * running_mean.value[ch] + momentum_ * mean;
      running_var.value[ch] = (1 - momentum_) * running_var.value[ch] + momentum_ * unbiased;
    } else {
      mean = running_mean.value[ch];
      var = running_var.value[ch];
    }
    const Scalar inv = Scalar(1) / std::sqrt(var + eps_);
    inv_std_[ch] = inv;
    const Scalar g = weight.value[ch], b = bias.value[ch];
    for (Index i = 0; i < n; ++i) {
      const Index off = (i * c + ch) * s;
      xhat_.values().segment(off, s) = (x.values().segment(off, s).array() - mean) * inv;
      y.values().segment(off, s) = xhat_.values().segment(off, s).array() * g + b;
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> BatchNorm<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Index n = grad_out.dim(0), c = channels_, s = grad_out.size() / (n * c);
  Tensor<Scalar> dx(grad_out.shape());
  const Scalar count = static_cast<Scalar>(n * s);
  for (Index ch = 0; ch < c; ++ch) {
    Scalar sum_g = 0, sum_gx = 0;
    for (Index i = 0; i < n; ++i) {
      const Index off = (i * c + ch) * s;
      sum_g += grad_out.values().segment(off, s).sum();
      sum_gx += grad_out.values().segment(off, s).dot(xhat_.values().segment(off, s));
    }
    weight.grad[ch] += sum_gx;
    if (bias.trainable) bias.grad[ch] += sum_g;
    const Scalar scale = weight.value[ch] * inv_std_[ch];
    for (Index i = 0; i < n; ++i) {
      const Index off = (i * c + ch) * s;
      if (mode_ == Mode::kTrain) {
        dx.values().segment(off, s) =
            (scale / count) * (count * grad_out.values().segment(off, s).array() - sum_g -
                               xhat_.values().segment(off, s).array() * sum_gx);
      } else {
        dx.values().segment(off, s) = scale * grad_out.values().segment(off, s);
      }
    }
  }
  return dx;
}

template <typename Scalar>
void BatchNorm<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
  out.push_back({prefix + ".running_mean", &running_mean});
  out.push_back({prefix + ".running_var", &running_var});
}

template <typename Scalar>
void BatchNorm<Scalar>::cost(const std::string& name, const Shape& chw, CostTable& rows) const {
  LayerCost row{name};
  row.params = channels_ + (bias.trainable ? channels_ : 0);
  row.elementwise = shape_size(chw);
  rows.push_back(row);
}

// ---------------------------------------------------------------- Linear

template <typename Scalar>
Linear<Scalar>::Linear(Index in_features, Index out_features, bool with_bias, Rng& rng)
    : weight({out_features, in_features}), in_(in_features), out_(out_features), has_bias_(with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < weight.value.size(); ++i) weight.value[i] = static_cast<Scalar>(dist(rng));
  if (with_bias) {
    bias = Parameter<Scalar>({out_features});
    for (Index i = 0; i < out_features; ++i) bias.value[i] = static_cast<Scalar>(dist(rng));
  }
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::forward(const Tensor<Scalar>& x) {
  require(x.rank() >= 1 && x.shape().back() == in_,
          "Linear: expected last axis " + std::to_string(in_) + ", got " + shape_string(x.shape()));
  input_ = x;
  const Index rows = x.size() / in_;
  Shape shape = x.shape();
  shape.back() = out_;
  Tensor<Scalar> y(shape);
  Eigen::Map<const RowMatrix<Scalar>> in(x.data(), rows, in_);
  Eigen::Map<RowMatrix<Scalar>> out(y.data(), rows, out_);
  out.noalias() = in * weight.value.matrix().transpose();
  if (has_bias_) out.rowwise() += bias.value.values().transpose();
  return y;
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Index rows = input_.size() / in_;
  Eigen::Map<const RowMatrix<Scalar>> g(grad_out.data(), rows, out_);
  Eigen::Map<const RowMatrix<Scalar>> in(input_.data(), rows, in_);
  weight.grad.matrix().noalias() += g.transpose() * in;
  if (has_bias_) bias.grad.values() += g.colwise().sum().transpose();
  Tensor<Scalar> dx(input_.shape());
  Eigen::Map<RowMatrix<Scalar>> d(dx.data(), rows, in_);
  d.noalias() = g * weight.value.matrix();
  return dx;
}

template <typename Scalar>
void Linear<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  out.push_back({prefix + ".weight", &weight});
  if (has_bias_) out.push_back({prefix + ".bias", &bias});
}

template <typename Scalar>
void Linear<Scalar>::cost(const std::string& name, Index rows, CostTable& out) const {
  LayerCost row{name};
  row.params = in_ * out_ + (has_bias_ ? out_ : 0);
  row.macs = rows * in_ * out_;
  out.push_back(row);
}

// ---------------------------------------------------------------- ReLU

template <typename Scalar>
Tensor<Scalar> ReLU<Scalar>::forward(const Tensor<Scalar>& x) {
  output_ = x;
  output_.values() = x.values().cwiseMax(Scalar(0));
  return output_;
}

template <typename Scalar>
Tensor<Scalar> ReLU<Scalar>::backward(const Tensor<Scalar>& grad_out) const {
  Tensor<Scalar> dx(grad_out.shape());
  dx.values() = (output_.values().array() > Scalar(0)).select(grad_out.values(), Scalar(0));
  return dx;
}

// ---------------------------------------------------------------- MaxPool2d

template <typename Scalar>
Tensor<Scalar> MaxPool2d<Scalar>::forward(const Tensor<Scalar>& x) {
  in_shape_ = x.shape();
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index ho = out_size(h), wo = out_size(w);
  Tensor<Scalar> y({n, c, ho, wo});
  argmax_.assign(static_cast<size_t>(y.size()), 0);
  Index o = 0;
  for (Index p = 0; p < n * c; ++p) {
    const Scalar* plane = x.data() + p * h * w;
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox, ++o) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        Index arg = -1;
        for (Index ky = 0; ky < kernel_; ++ky) {
          const Index iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= h) continue;
          for (Index kx = 0; kx < kernel_; ++kx) {
            const Index ix = ox * stride_ - pad_ + kx;
            if (ix < 0 || ix >= w) continue;
            if (plane[iy * w + ix] > best) best = plane[iy * w + ix], arg = iy * w + ix;
          }
        }
        y[o] = best;
        argmax_[static_cast<size_t>(o)] = p * h * w + arg;
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> MaxPool2d<Scalar>::backward(const Tensor<Scalar>& grad_out) const {
  Tensor<Scalar> dx(in_shape_);
  for (Index o = 0; o < grad_out.size(); ++o) dx[argmax_[static_cast<size_t>(o)]] += grad_out[o];
  return dx;
}

// ---------------------------------------------------------------- pooling helpers

template <typename Scalar>
Tensor<Scalar> avg_pool_forward(const Tensor<Scalar>& x, Index window) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index ho = h / window, wo = w / window;
  require(ho > 0 && wo > 0, "avg_pool: window " + std::to_string(window) + " larger than " + shape_string(x.shape()));
  Tensor<Scalar> y({n, c, ho, wo});
  const Scalar inv = Scalar(1) / static_cast<Scalar>(window * window);
  for (Index p = 0; p < n * c; ++p) {
    const Scalar* plane = x.data() + p * h * w;
    Scalar* out = y.data() + p * ho * wo;
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) {
        Scalar sum = 0;
        for (Index ky = 0; ky < window; ++ky) {
          for (Index kx = 0; kx < window; ++kx) sum += plane[(oy * window + ky) * w + ox * window + kx];
        }
        out[oy * wo + ox] = sum * inv;
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> avg_pool_backward(const Tensor<Scalar>& grad_out, const Shape& in_shape, Index window) {
  Tensor<Scalar> dx(in_shape);
  const Index h = in_shape[2], w = in_shape[3];
  const Index ho = grad_out.dim(2), wo = grad_out.dim(3);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(window * window);
  for (Index p = 0; p < in_shape[0] * in_shape[1]; ++p) {
    Scalar* plane = dx.data() + p * h * w;
    const Scalar* g = grad_out.data() + p * ho * wo;
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) {
        const Scalar v = g[oy * wo + ox] * inv;
        for (Index ky = 0; ky < window; ++ky) {
          for (Index kx = 0; kx < window; ++kx) plane[(oy * window + ky) * w + ox * window + kx] += v;
        }
      }
    }
  }
  return dx;
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x, Index factor) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<Scalar> y({n, c, h * factor, w * factor});
  const Index wo = w * factor;
  for (Index p = 0; p < n * c; ++p) {
    const Scalar* in = x.data() + p * h * w;
    Scalar* out = y.data() + p * h * w * factor * factor;
    for (Index oy = 0; oy < h * factor; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) out[oy * wo + ox] = in[(oy / factor) * w + ox / factor];
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest_backward(const Tensor<Scalar>& grad_out, Index factor) {
  const Index n = grad_out.dim(0), c = grad_out.dim(1), ho = grad_out.dim(2), wo = grad_out.dim(3);
  const Index h = ho / factor, w = wo / factor;
  Tensor<Scalar> dx({n, c, h, w});
  for (Index p = 0; p < n * c; ++p) {
    const Scalar* g = grad_out.data() + p * ho * wo;
    Scalar* out = dx.data() + p * h * w;
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) out[(oy / factor) * w + ox / factor] += g[oy * wo + ox];
    }
  }
  return dx;
}

#define WRIM_INSTANTIATE(T)                                                                   \
  template class Conv2d<T>;                                                                   \
  template class BatchNorm<T>;                                                                \
  template class Linear<T>;                                                                   \
  template class ReLU<T>;                                                                     \
  template class MaxPool2d<T>;                                                                \
  template void kaiming_normal<T>(Tensor<T>&, Index, Rng&);                                   \
  template Tensor<T> avg_pool_forward<T>(const Tensor<T>&, Index);                            \
  template Tensor<T> avg_pool_backward<T>(const Tensor<T>&, const Shape&, Index);             \
  template Tensor<T> upsample_nearest<T>(const Tensor<T>&, Index);                            \
  template Tensor<T> upsample_nearest_backward<T>(const Tensor<T>&, Index);

WRIM_INSTANTIATE(float)
WRIM_INSTANTIATE(double)

}  // namespace wrim
