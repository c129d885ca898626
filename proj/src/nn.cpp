#include "qahfl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <stdexcept>

namespace qahfl {
namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.99;  // running = m * running + (1 - m) * batch

// C[M x N] (+)= A[M x K] * B[K x N], all row-major. The ikj order keeps the
// inner loop contiguous in both B and C so the compiler can vectorize it;
// conv and dense cost lives here.
template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + static_cast<size_t>(M) * N, T(0));
  for (int i = 0; i < M; ++i) {
    const T* a_row = A + static_cast<size_t>(i) * K;
    T* c_row = C + static_cast<size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      T a = a_row[k];
      if (a == T(0)) continue;
      const T* b_row = B + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[M x N] (+)= A[M x K] * B^T where B is N x K row-major.
template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    const T* a_row = A + static_cast<size_t>(i) * K;
    T* c_row = C + static_cast<size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* b_row = B + static_cast<size_t>(j) * K;
      T s = accumulate ? c_row[j] : T(0);
      for (int k = 0; k < K; ++k) s += a_row[k] * b_row[k];
      c_row[j] = s;
    }
  }
}

// C[M x N] (+)= A^T * B where A is K x M and B is K x N, both row-major.
template <typename T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + static_cast<size_t>(M) * N, T(0));
  for (int k = 0; k < K; ++k) {
    const T* a_row = A + static_cast<size_t>(k) * M;
    const T* b_row = B + static_cast<size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      T a = a_row[i];
      if (a == T(0)) continue;
      T* c_row = C + static_cast<size_t>(i) * N;
      for (int j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// Unfolds one sample (c x h x w) into columns (c*k*k rows, h*w cols) for a
// same-padded stride-1 convolution.
template <typename T>
void im2col(const T* x, int c, int h, int w, int k, T* cols) {
  int pad = k / 2;
  size_t row = 0;
  for (int ci = 0; ci < c; ++ci) {
    const T* chan = x + static_cast<size_t>(ci) * h * w;
    for (int dy = 0; dy < k; ++dy) {
      for (int dx = 0; dx < k; ++dx, ++row) {
        T* out = cols + row * static_cast<size_t>(h) * w;
        for (int y = 0; y < h; ++y) {
          int sy = y + dy - pad;
          if (sy < 0 || sy >= h) {
            std::fill(out + static_cast<size_t>(y) * w, out + static_cast<size_t>(y + 1) * w, T(0));
            continue;
          }
          const T* src = chan + static_cast<size_t>(sy) * w;
          T* dst = out + static_cast<size_t>(y) * w;
          for (int x2 = 0; x2 < w; ++x2) {
            int sx = x2 + dx - pad;
            dst[x2] = (sx < 0 || sx >= w) ? T(0) : src[sx];
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col.
template <typename T>
void col2im_add(const T* cols, int c, int h, int w, int k, T* dx) {
  int pad = k / 2;
  size_t row = 0;
  for (int ci = 0; ci < c; ++ci) {
    T* chan = dx + static_cast<size_t>(ci) * h * w;
    for (int dy = 0; dy < k; ++dy) {
      for (int dx2 = 0; dx2 < k; ++dx2, ++row) {
        const T* src_row = cols + row * static_cast<size_t>(h) * w;
        for (int y = 0; y < h; ++y) {
          int sy = y + dy - pad;
          if (sy < 0 || sy >= h) continue;
          T* dst = chan + static_cast<size_t>(sy) * w;
          const T* src = src_row + static_cast<size_t>(y) * w;
          for (int x2 = 0; x2 < w; ++x2) {
            int sx = x2 + dx2 - pad;
            if (sx >= 0 && sx < w) dst[sx] += src[x2];
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

}  // namespace

std::vector<LayerLayout> plan_layout(const ModelSpec& spec) {
  if (spec.input_h <= 0 || spec.input_w <= 0 || spec.input_ch <= 0)
    throw std::invalid_argument("plan_layout: bad input shape");
  std::vector<LayerLayout> out;
  out.reserve(spec.layers.size());
  int c = spec.input_ch, h = spec.input_h, w = spec.input_w;
  int64_t poff = 0, boff = 0;
  int taps = 0;
  std::map<int, std::array<int, 3>> slots;

  for (const LayerDesc& l : spec.layers) {
    LayerLayout ll;
    ll.in_c = c;
    ll.in_h = h;
    ll.in_w = w;
    ll.param_offset = poff;
    ll.buffer_offset = boff;
    switch (l.kind) {
      case LayerKind::Conv2d:
        if (l.out_ch <= 0 || l.kernel <= 0 || l.kernel % 2 == 0)
          throw std::invalid_argument("plan_layout: conv needs filters and an odd kernel: " + l.name);
        ll.param_count = static_cast<int64_t>(l.out_ch) * c * l.kernel * l.kernel + l.out_ch;
        c = l.out_ch;
        break;
      case LayerKind::Relu:
        break;
      case LayerKind::MaxPool2x2:
        h = (h + 1) / 2;
        w = (w + 1) / 2;
        break;
      case LayerKind::GlobalAvgPool:
        h = 1;
        w = 1;
        break;
      case LayerKind::BatchNorm:
        ll.param_count = 2 * c;
        ll.buffer_count = 2 * c;
        break;
      case LayerKind::Dropout:
        if (l.rate < 0.0 || l.rate >= 1.0)
          throw std::invalid_argument("plan_layout: dropout rate out of [0, 1): " + l.name);
        break;
      case LayerKind::Dense:
        if (h != 1 || w != 1)
          throw std::invalid_argument("plan_layout: dense on non-flat activation: " + l.name);
        if (l.out_ch <= 0) throw std::invalid_argument("plan_layout: dense needs a width: " + l.name);
        ll.param_count = static_cast<int64_t>(l.out_ch) * c + l.out_ch;
        c = l.out_ch;
        break;
      case LayerKind::SkipSave:
        slots[l.slot] = {c, h, w};
        break;
      case LayerKind::SkipAdd: {
        auto it = slots.find(l.slot);
        if (it == slots.end())
          throw std::invalid_argument("plan_layout: skip add before save: " + l.name);
        if (it->second != std::array<int, 3>{c, h, w})
          throw std::invalid_argument("plan_layout: skip shape mismatch: " + l.name);
        break;
      }
      case LayerKind::SqueezeExcite:
        if (l.hidden <= 0)
          throw std::invalid_argument("plan_layout: squeeze-excite needs a bottleneck: " + l.name);
        ll.param_count = static_cast<int64_t>(l.hidden) * c + l.hidden +
                         static_cast<int64_t>(c) * l.hidden + c;
        break;
      case LayerKind::FeatureTap:
        ++taps;
        if (spec.feature_dim > 0 && c * h * w != spec.feature_dim)
          throw std::invalid_argument("plan_layout: feature tap width " +
                                      std::to_string(c * h * w) + " != declared " +
                                      std::to_string(spec.feature_dim));
        break;
    }
    ll.out_c = c;
    ll.out_h = h;
    ll.out_w = w;
    poff += ll.param_count;
    boff += ll.buffer_count;
    out.push_back(ll);
  }
  if (spec.feature_dim > 0 && taps != 1)
    throw std::invalid_argument("plan_layout: expected exactly one feature tap");
  if (!out.empty() && (c != spec.n_classes || h != 1 || w != 1))
    throw std::invalid_argument("plan_layout: network must end in n_classes logits");
  return out;
}

int64_t ModelSpec::param_count() const {
  int64_t n = 0;
  for (const LayerLayout& l : plan_layout(*this)) n += l.param_count;
  return n;
}

int64_t ModelSpec::buffer_count() const {
  int64_t n = 0;
  for (const LayerLayout& l : plan_layout(*this)) n += l.buffer_count;
  return n;
}

template <typename T>
Net<T>::Net(const ModelSpec& spec) : spec_(spec), layout_(plan_layout(spec)) {
  params_.assign(static_cast<size_t>(spec_.param_count()), T(0));
  buffers_.assign(static_cast<size_t>(spec_.buffer_count()), T(0));
  // Identity running stats until the first training batch.
  for (size_t i = 0; i < layout_.size(); ++i) {
    if (spec_.layers[i].kind == LayerKind::BatchNorm) {
      int cch = layout_[i].in_c;
      for (int c = 0; c < cch; ++c) buffers_[layout_[i].buffer_offset + cch + c] = T(1);
    }
  }
}

template <typename T>
void Net<T>::init_params(Rng& rng) {
  for (size_t i = 0; i < layout_.size(); ++i) {
    const LayerDesc& l = spec_.layers[i];
    const LayerLayout& ll = layout_[i];
    T* p = params_.data() + ll.param_offset;
    switch (l.kind) {
      case LayerKind::Conv2d: {
        int64_t nw = static_cast<int64_t>(l.out_ch) * ll.in_c * l.kernel * l.kernel;
        T std = static_cast<T>(std::sqrt(2.0 / (ll.in_c * l.kernel * l.kernel)));
        for (int64_t j = 0; j < nw; ++j) p[j] = static_cast<T>(rng.gaussian()) * std;
        for (int j = 0; j < l.out_ch; ++j) p[nw + j] = T(0);
        break;
      }
      case LayerKind::Dense: {
        int64_t nw = static_cast<int64_t>(l.out_ch) * ll.in_c;
        T std = static_cast<T>(std::sqrt(2.0 / ll.in_c));
        for (int64_t j = 0; j < nw; ++j) p[j] = static_cast<T>(rng.gaussian()) * std;
        for (int j = 0; j < l.out_ch; ++j) p[nw + j] = T(0);
        break;
      }
      case LayerKind::BatchNorm:
        for (int c = 0; c < ll.in_c; ++c) p[c] = T(1);
        for (int c = 0; c < ll.in_c; ++c) p[ll.in_c + c] = T(0);
        for (int c = 0; c < ll.in_c; ++c) buffers_[ll.buffer_offset + c] = T(0);
        for (int c = 0; c < ll.in_c; ++c) buffers_[ll.buffer_offset + ll.in_c + c] = T(1);
        break;
      case LayerKind::SqueezeExcite: {
        int c = ll.in_c, hdim = l.hidden;
        T* w1 = p;
        T* b1 = w1 + static_cast<int64_t>(hdim) * c;
        T* w2 = b1 + hdim;
        T* b2 = w2 + static_cast<int64_t>(c) * hdim;
        T s1 = static_cast<T>(std::sqrt(2.0 / c)), s2 = static_cast<T>(std::sqrt(2.0 / hdim));
        for (int64_t j = 0; j < static_cast<int64_t>(hdim) * c; ++j)
          w1[j] = static_cast<T>(rng.gaussian()) * s1;
        std::fill(b1, b1 + hdim, T(0));
        for (int64_t j = 0; j < static_cast<int64_t>(c) * hdim; ++j)
          w2[j] = static_cast<T>(rng.gaussian()) * s2;
        std::fill(b2, b2 + c, T(0));
        break;
      }
      default:
        break;
    }
  }
}

template <typename T>
void Net<T>::forward(const T* x, int batch, bool train, Rng* drop_rng, Flow* flow,
                     std::vector<T>* logits, std::vector<T>* features, bool update_buffers) {
  forward_impl(x, batch, train, drop_rng, flow, logits, features, update_buffers, nullptr);
}

template <typename T>
void Net<T>::refresh_stats(const T* xs, int n, int batch_size) {
  if (n <= 0) throw std::invalid_argument("Net::refresh_stats: no examples");
  if (batch_size <= 0) throw std::invalid_argument("Net::refresh_stats: bad batch size");
  if (buffers_.empty()) return;

  // First slot per channel accumulates batch-weighted E[x], second E[x^2];
  // converted to mean/var once the sweep has covered everything.
  std::vector<T> acc(buffers_.size(), T(0));
  size_t in_vol = static_cast<size_t>(spec_.input_ch) * spec_.input_h * spec_.input_w;
  for (int at = 0; at < n; at += batch_size) {
    int b = std::min(batch_size, n - at);
    std::vector<T> logits;
    forward_impl(xs + static_cast<size_t>(at) * in_vol, b, true, nullptr, nullptr, &logits,
                 nullptr, false, &acc);
  }
  for (size_t i = 0; i < layout_.size(); ++i) {
    if (spec_.layers[i].kind != LayerKind::BatchNorm) continue;
    const LayerLayout& ll = layout_[i];
    int cch = ll.in_c;
    for (int c = 0; c < cch; ++c) {
      T mean = acc[ll.buffer_offset + c] / static_cast<T>(n);
      T ex2 = acc[ll.buffer_offset + cch + c] / static_cast<T>(n);
      T var = ex2 - mean * mean;
      if (var < T(0)) var = T(0);
      buffers_[ll.buffer_offset + c] = mean;
      buffers_[ll.buffer_offset + cch + c] = var;
    }
  }
}

template <typename T>
void Net<T>::forward_impl(const T* x, int batch, bool train, Rng* drop_rng, Flow* flow,
                          std::vector<T>* logits, std::vector<T>* features, bool update_buffers,
                          std::vector<T>* refresh_acc) {
  if (batch <= 0) throw std::invalid_argument("Net::forward: empty batch");
  if (flow && !train) throw std::invalid_argument("Net::forward: backward needs training mode");
  size_t n_layers = layout_.size();
  if (flow) {
    flow->batch = batch;
    flow->acts.assign(n_layers + 1, {});
    flow->argmax.assign(n_layers, {});
    flow->aux.assign(n_layers, {});
  }

  std::vector<T> cur(x, x + static_cast<size_t>(batch) * spec_.input_ch * spec_.input_h *
                            spec_.input_w);
  std::vector<T> next;
  std::map<int, std::vector<T>> saved;

  for (size_t i = 0; i < n_layers; ++i) {
    const LayerDesc& l = spec_.layers[i];
    const LayerLayout& ll = layout_[i];
    if (flow) flow->acts[i] = cur;
    size_t in_vol = static_cast<size_t>(ll.in_c) * ll.in_h * ll.in_w;
    size_t out_vol = static_cast<size_t>(ll.out_c) * ll.out_h * ll.out_w;
    const T* p = params_.data() + ll.param_offset;

    switch (l.kind) {
      case LayerKind::Conv2d: {
        next.assign(static_cast<size_t>(batch) * out_vol, T(0));
        int ckk = ll.in_c * l.kernel * l.kernel;
        int hw = ll.in_h * ll.in_w;
        scratch_cols_.resize(static_cast<size_t>(ckk) * hw);
        const T* bias = p + static_cast<int64_t>(l.out_ch) * ckk;
        for (int b = 0; b < batch; ++b) {
          im2col(cur.data() + b * in_vol, ll.in_c, ll.in_h, ll.in_w, l.kernel,
                 scratch_cols_.data());
          T* out = next.data() + b * out_vol;
          gemm_nn(l.out_ch, hw, ckk, p, scratch_cols_.data(), out, false);
          for (int oc = 0; oc < l.out_ch; ++oc) {
            T bv = bias[oc];
            T* row = out + static_cast<size_t>(oc) * hw;
            for (int j = 0; j < hw; ++j) row[j] += bv;
          }
        }
        cur.swap(next);
        break;
      }
      case LayerKind::Relu:
        for (T& v : cur)
          if (v < T(0)) v = T(0);
        break;
      case LayerKind::MaxPool2x2: {
        next.assign(static_cast<size_t>(batch) * out_vol, T(0));
        std::vector<int>* am = flow ? &flow->argmax[i] : nullptr;
        if (am) am->assign(static_cast<size_t>(batch) * out_vol, 0);
        for (int b = 0; b < batch; ++b) {
          for (int c = 0; c < ll.in_c; ++c) {
            const T* in = cur.data() + b * in_vol + static_cast<size_t>(c) * ll.in_h * ll.in_w;
            T* out = next.data() + b * out_vol + static_cast<size_t>(c) * ll.out_h * ll.out_w;
            for (int oy = 0; oy < ll.out_h; ++oy) {
              for (int ox = 0; ox < ll.out_w; ++ox) {
                int y0 = 2 * oy, x0 = 2 * ox;
                int y1 = std::min(y0 + 2, ll.in_h), x1 = std::min(x0 + 2, ll.in_w);
                T best = in[y0 * ll.in_w + x0];
                int best_idx = y0 * ll.in_w + x0;
                for (int y = y0; y < y1; ++y)
                  for (int x2 = x0; x2 < x1; ++x2)
                    if (in[y * ll.in_w + x2] > best) {
                      best = in[y * ll.in_w + x2];
                      best_idx = y * ll.in_w + x2;
                    }
                out[oy * ll.out_w + ox] = best;
                if (am)
                  (*am)[b * out_vol + static_cast<size_t>(c) * ll.out_h * ll.out_w +
                        oy * ll.out_w + ox] = best_idx;
              }
            }
          }
        }
        cur.swap(next);
        break;
      }
      case LayerKind::GlobalAvgPool: {
        next.assign(static_cast<size_t>(batch) * ll.out_c, T(0));
        int hw = ll.in_h * ll.in_w;
        for (int b = 0; b < batch; ++b)
          for (int c = 0; c < ll.in_c; ++c) {
            const T* in = cur.data() + b * in_vol + static_cast<size_t>(c) * hw;
            T s = T(0);
            for (int j = 0; j < hw; ++j) s += in[j];
            next[b * static_cast<size_t>(ll.out_c) + c] = s / static_cast<T>(hw);
          }
        cur.swap(next);
        break;
      }
      case LayerKind::BatchNorm: {
        int cch = ll.in_c, hw = ll.in_h * ll.in_w;
        int64_t n = static_cast<int64_t>(batch) * hw;
        const T* gamma = p;
        const T* beta = p + cch;
        T* rmean = buffers_.data() + ll.buffer_offset;
        T* rvar = rmean + cch;
        std::vector<T>* aux = flow ? &flow->aux[i] : nullptr;
        if (aux) aux->assign(2 * static_cast<size_t>(cch), T(0));
        for (int c = 0; c < cch; ++c) {
          T mean, invstd;
          if (train) {
            T s = T(0), sq = T(0);
            for (int b = 0; b < batch; ++b) {
              const T* in = cur.data() + b * in_vol + static_cast<size_t>(c) * hw;
              for (int j = 0; j < hw; ++j) {
                s += in[j];
                sq += in[j] * in[j];
              }
            }
            mean = s / static_cast<T>(n);
            T var = sq / static_cast<T>(n) - mean * mean;
            if (var < T(0)) var = T(0);
            invstd = T(1) / std::sqrt(var + static_cast<T>(kBnEps));
            if (update_buffers) {
              rmean[c] = static_cast<T>(kBnMomentum) * rmean[c] +
                         static_cast<T>(1.0 - kBnMomentum) * mean;
              rvar[c] = static_cast<T>(kBnMomentum) * rvar[c] +
                        static_cast<T>(1.0 - kBnMomentum) * var;
            }
            if (refresh_acc) {
              (*refresh_acc)[ll.buffer_offset + c] += static_cast<T>(batch) * mean;
              (*refresh_acc)[ll.buffer_offset + cch + c] +=
                  static_cast<T>(batch) * (var + mean * mean);
            }
          } else {
            mean = rmean[c];
            invstd = T(1) / std::sqrt(rvar[c] + static_cast<T>(kBnEps));
          }
          if (aux) {
            (*aux)[c] = mean;
            (*aux)[cch + c] = invstd;
          }
          T g = gamma[c], bt = beta[c];
          for (int b = 0; b < batch; ++b) {
            T* io = cur.data() + b * in_vol + static_cast<size_t>(c) * hw;
            for (int j = 0; j < hw; ++j) io[j] = g * (io[j] - mean) * invstd + bt;
          }
        }
        break;
      }
      case LayerKind::Dropout: {
        if (!train || l.rate == 0.0 || refresh_acc) break;
        if (!drop_rng) throw std::invalid_argument("Net::forward: dropout needs an rng");
        T keep_scale = static_cast<T>(1.0 / (1.0 - l.rate));
        std::vector<T>* aux = flow ? &flow->aux[i] : nullptr;
        if (aux) aux->assign(cur.size(), T(0));
        for (size_t j = 0; j < cur.size(); ++j) {
          T m = drop_rng->uniform() < l.rate ? T(0) : keep_scale;
          cur[j] *= m;
          if (aux) (*aux)[j] = m;
        }
        break;
      }
      case LayerKind::Dense: {
        next.assign(static_cast<size_t>(batch) * l.out_ch, T(0));
        const T* bias = p + static_cast<int64_t>(l.out_ch) * ll.in_c;
        // y = x W^T: gemm_nt over (batch x in) times (out x in).
        gemm_nt(batch, l.out_ch, ll.in_c, cur.data(), p, next.data(), false);
        for (int b = 0; b < batch; ++b)
          for (int o = 0; o < l.out_ch; ++o) next[b * static_cast<size_t>(l.out_ch) + o] += bias[o];
        cur.swap(next);
        break;
      }
      case LayerKind::SkipSave:
        saved[l.slot] = cur;
        break;
      case LayerKind::SkipAdd: {
        const std::vector<T>& s = saved.at(l.slot);
        for (size_t j = 0; j < cur.size(); ++j) cur[j] += s[j];
        break;
      }
      case LayerKind::SqueezeExcite: {
        int c = ll.in_c, hdim = l.hidden, hw = ll.in_h * ll.in_w;
        const T* w1 = p;
        const T* b1 = w1 + static_cast<int64_t>(hdim) * c;
        const T* w2 = b1 + hdim;
        const T* b2 = w2 + static_cast<int64_t>(c) * hdim;
        std::vector<T>* aux = flow ? &flow->aux[i] : nullptr;
        // aux layout: s(batch*c), zpre(batch*hidden), g(batch*c)
        if (aux) aux->assign(static_cast<size_t>(batch) * (2 * c + hdim), T(0));
        std::vector<T> s(c), zpre(hdim), z(hdim), g(c);
        for (int b = 0; b < batch; ++b) {
          T* xb = cur.data() + b * in_vol;
          for (int ci = 0; ci < c; ++ci) {
            T acc = T(0);
            const T* chan = xb + static_cast<size_t>(ci) * hw;
            for (int j = 0; j < hw; ++j) acc += chan[j];
            s[ci] = acc / static_cast<T>(hw);
          }
          for (int hh = 0; hh < hdim; ++hh) {
            T acc = b1[hh];
            const T* row = w1 + static_cast<size_t>(hh) * c;
            for (int ci = 0; ci < c; ++ci) acc += row[ci] * s[ci];
            zpre[hh] = acc;
            z[hh] = acc > T(0) ? acc : T(0);
          }
          for (int ci = 0; ci < c; ++ci) {
            T acc = b2[ci];
            const T* row = w2 + static_cast<size_t>(ci) * hdim;
            for (int hh = 0; hh < hdim; ++hh) acc += row[hh] * z[hh];
            g[ci] = sigmoid(acc);
          }
          for (int ci = 0; ci < c; ++ci) {
            T* chan = xb + static_cast<size_t>(ci) * hw;
            for (int j = 0; j < hw; ++j) chan[j] *= g[ci];
          }
          if (aux) {
            std::copy(s.begin(), s.end(), aux->begin() + static_cast<size_t>(b) * c);
            std::copy(zpre.begin(), zpre.end(),
                      aux->begin() + static_cast<size_t>(batch) * c +
                          static_cast<size_t>(b) * hdim);
            std::copy(g.begin(), g.end(), aux->begin() + static_cast<size_t>(batch) * (c + hdim) +
                                              static_cast<size_t>(b) * c);
          }
        }
        break;
      }
      case LayerKind::FeatureTap:
        if (features) features->assign(cur.begin(), cur.end());
        break;
    }
  }
  if (flow) flow->acts[n_layers] = cur;
  if (logits) *logits = cur;
}

template <typename T>
void Net<T>::backward(const Flow& flow, const std::vector<T>& dlogits, std::vector<T>* grad) {
  if (grad->size() != params_.size())
    throw std::invalid_argument("Net::backward: grad vector has the wrong size");
  int batch = flow.batch;
  std::vector<T> dcur = dlogits;
  std::vector<T> dnext;
  std::map<int, std::vector<T>> pending;  // slot -> gradient waiting at its SkipSave

  for (size_t ii = layout_.size(); ii-- > 0;) {
    const LayerDesc& l = spec_.layers[ii];
    const LayerLayout& ll = layout_[ii];
    const std::vector<T>& x_in = flow.acts[ii];
    size_t in_vol = static_cast<size_t>(ll.in_c) * ll.in_h * ll.in_w;
    size_t out_vol = static_cast<size_t>(ll.out_c) * ll.out_h * ll.out_w;
    const T* p = params_.data() + ll.param_offset;
    T* gp = grad->data() + ll.param_offset;

    switch (l.kind) {
      case LayerKind::Conv2d: {
        dnext.assign(static_cast<size_t>(batch) * in_vol, T(0));
        int ckk = ll.in_c * l.kernel * l.kernel;
        int hw = ll.in_h * ll.in_w;
        scratch_cols_.resize(static_cast<size_t>(ckk) * hw);
        std::vector<T> dcols(static_cast<size_t>(ckk) * hw);
        T* gbias = gp + static_cast<int64_t>(l.out_ch) * ckk;
        for (int b = 0; b < batch; ++b) {
          const T* dout = dcur.data() + b * out_vol;
          im2col(x_in.data() + b * in_vol, ll.in_c, ll.in_h, ll.in_w, l.kernel,
                 scratch_cols_.data());
          // dW += dOut * cols^T, db += row sums, dX = col2im(W^T * dOut).
          gemm_nt(l.out_ch, ckk, hw, dout, scratch_cols_.data(), gp, true);
          for (int oc = 0; oc < l.out_ch; ++oc) {
            T s = T(0);
            const T* row = dout + static_cast<size_t>(oc) * hw;
            for (int j = 0; j < hw; ++j) s += row[j];
            gbias[oc] += s;
          }
          gemm_tn(ckk, hw, l.out_ch, p, dout, dcols.data(), false);
          col2im_add(dcols.data(), ll.in_c, ll.in_h, ll.in_w, l.kernel,
                     dnext.data() + b * in_vol);
        }
        dcur.swap(dnext);
        break;
      }
      case LayerKind::Relu:
        for (size_t j = 0; j < dcur.size(); ++j)
          if (x_in[j] <= T(0)) dcur[j] = T(0);
        break;
      case LayerKind::MaxPool2x2: {
        dnext.assign(static_cast<size_t>(batch) * in_vol, T(0));
        const std::vector<int>& am = flow.argmax[ii];
        for (int b = 0; b < batch; ++b)
          for (int c = 0; c < ll.out_c; ++c) {
            const T* dout = dcur.data() + b * out_vol + static_cast<size_t>(c) * ll.out_h * ll.out_w;
            T* din = dnext.data() + b * in_vol + static_cast<size_t>(c) * ll.in_h * ll.in_w;
            const int* amc = am.data() + b * out_vol + static_cast<size_t>(c) * ll.out_h * ll.out_w;
            for (int j = 0; j < ll.out_h * ll.out_w; ++j) din[amc[j]] += dout[j];
          }
        dcur.swap(dnext);
        break;
      }
      case LayerKind::GlobalAvgPool: {
        dnext.assign(static_cast<size_t>(batch) * in_vol, T(0));
        int hw = ll.in_h * ll.in_w;
        for (int b = 0; b < batch; ++b)
          for (int c = 0; c < ll.in_c; ++c) {
            T g = dcur[b * static_cast<size_t>(ll.out_c) + c] / static_cast<T>(hw);
            T* din = dnext.data() + b * in_vol + static_cast<size_t>(c) * hw;
            for (int j = 0; j < hw; ++j) din[j] = g;
          }
        dcur.swap(dnext);
        break;
      }
      case LayerKind::BatchNorm: {
        int cch = ll.in_c, hw = ll.in_h * ll.in_w;
        int64_t n = static_cast<int64_t>(batch) * hw;
        const T* gamma = p;
        const std::vector<T>& aux = flow.aux[ii];
        dnext.assign(static_cast<size_t>(batch) * in_vol, T(0));
        for (int c = 0; c < cch; ++c) {
          T mean = aux[c], invstd = aux[cch + c];
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (int b = 0; b < batch; ++b) {
            const T* xi = x_in.data() + b * in_vol + static_cast<size_t>(c) * hw;
            const T* dy = dcur.data() + b * in_vol + static_cast<size_t>(c) * hw;
            for (int j = 0; j < hw; ++j) {
              sum_dy += dy[j];
              sum_dy_xhat += dy[j] * (xi[j] - mean) * invstd;
            }
          }
          gp[cch + c] += sum_dy;        // d beta
          gp[c] += sum_dy_xhat;         // d gamma
          T k1 = gamma[c] * invstd / static_cast<T>(n);
          for (int b = 0; b < batch; ++b) {
            const T* xi = x_in.data() + b * in_vol + static_cast<size_t>(c) * hw;
            const T* dy = dcur.data() + b * in_vol + static_cast<size_t>(c) * hw;
            T* dx = dnext.data() + b * in_vol + static_cast<size_t>(c) * hw;
            for (int j = 0; j < hw; ++j) {
              T xhat = (xi[j] - mean) * invstd;
              dx[j] = k1 * (static_cast<T>(n) * dy[j] - sum_dy - xhat * sum_dy_xhat);
            }
          }
        }
        dcur.swap(dnext);
        break;
      }
      case LayerKind::Dropout: {
        const std::vector<T>& mask = flow.aux[ii];
        if (!mask.empty())
          for (size_t j = 0; j < dcur.size(); ++j) dcur[j] *= mask[j];
        break;
      }
      case LayerKind::Dense: {
        dnext.assign(static_cast<size_t>(batch) * ll.in_c, T(0));
        T* gbias = gp + static_cast<int64_t>(l.out_ch) * ll.in_c;
        // dW += dOut^T X, db += column sums, dX = dOut W.
        gemm_tn(l.out_ch, ll.in_c, batch, dcur.data(), x_in.data(), gp, true);
        for (int b = 0; b < batch; ++b)
          for (int o = 0; o < l.out_ch; ++o) gbias[o] += dcur[b * static_cast<size_t>(l.out_ch) + o];
        gemm_nn(batch, ll.in_c, l.out_ch, dcur.data(), p, dnext.data(), false);
        dcur.swap(dnext);
        break;
      }
      case LayerKind::SkipSave: {
        auto it = pending.find(l.slot);
        if (it != pending.end()) {
          for (size_t j = 0; j < dcur.size(); ++j) dcur[j] += it->second[j];
          pending.erase(it);
        }
        break;
      }
      case LayerKind::SkipAdd: {
        // The join passes the gradient straight through and also routes a
        // copy to the matching SkipSave further back.
        auto [it, fresh] = pending.try_emplace(l.slot, dcur);
        if (!fresh)
          for (size_t j = 0; j < dcur.size(); ++j) it->second[j] += dcur[j];
        break;
      }
      case LayerKind::SqueezeExcite: {
        int c = ll.in_c, hdim = l.hidden, hw = ll.in_h * ll.in_w;
        const T* w1 = p;
        const T* w2 = p + static_cast<int64_t>(hdim) * c + hdim;
        T* gw1 = gp;
        T* gb1 = gw1 + static_cast<int64_t>(hdim) * c;
        T* gw2 = gb1 + hdim;
        T* gb2 = gw2 + static_cast<int64_t>(c) * hdim;
        const std::vector<T>& aux = flow.aux[ii];
        const T* s_all = aux.data();
        const T* zpre_all = aux.data() + static_cast<size_t>(batch) * c;
        const T* g_all = aux.data() + static_cast<size_t>(batch) * (c + hdim);
        dnext.assign(static_cast<size_t>(batch) * in_vol, T(0));
        std::vector<T> dg(c), dgpre(c), dz(hdim), dzpre(hdim), ds(c);
        for (int b = 0; b < batch; ++b) {
          const T* xb = x_in.data() + b * in_vol;
          const T* dyb = dcur.data() + b * in_vol;
          T* dxb = dnext.data() + b * in_vol;
          const T* s = s_all + static_cast<size_t>(b) * c;
          const T* zpre = zpre_all + static_cast<size_t>(b) * hdim;
          const T* g = g_all + static_cast<size_t>(b) * c;
          for (int ci = 0; ci < c; ++ci) {
            const T* xc = xb + static_cast<size_t>(ci) * hw;
            const T* dyc = dyb + static_cast<size_t>(ci) * hw;
            T* dxc = dxb + static_cast<size_t>(ci) * hw;
            T acc = T(0);
            for (int j = 0; j < hw; ++j) {
              acc += dyc[j] * xc[j];
              dxc[j] = dyc[j] * g[ci];
            }
            dg[ci] = acc;
            dgpre[ci] = acc * g[ci] * (T(1) - g[ci]);
          }
          for (int ci = 0; ci < c; ++ci) {
            T* grow = gw2 + static_cast<size_t>(ci) * hdim;
            for (int hh = 0; hh < hdim; ++hh) {
              T z = zpre[hh] > T(0) ? zpre[hh] : T(0);
              grow[hh] += dgpre[ci] * z;
            }
            gb2[ci] += dgpre[ci];
          }
          for (int hh = 0; hh < hdim; ++hh) {
            T acc = T(0);
            for (int ci = 0; ci < c; ++ci) acc += w2[static_cast<size_t>(ci) * hdim + hh] * dgpre[ci];
            dz[hh] = acc;
            dzpre[hh] = zpre[hh] > T(0) ? acc : T(0);
          }
          for (int hh = 0; hh < hdim; ++hh) {
            T* grow = gw1 + static_cast<size_t>(hh) * c;
            for (int ci = 0; ci < c; ++ci) grow[ci] += dzpre[hh] * s[ci];
            gb1[hh] += dzpre[hh];
          }
          for (int ci = 0; ci < c; ++ci) {
            T acc = T(0);
            for (int hh = 0; hh < hdim; ++hh) acc += w1[static_cast<size_t>(hh) * c + ci] * dzpre[hh];
            ds[ci] = acc / static_cast<T>(hw);
          }
          for (int ci = 0; ci < c; ++ci) {
            T* dxc = dxb + static_cast<size_t>(ci) * hw;
            for (int j = 0; j < hw; ++j) dxc[j] += ds[ci];
          }
        }
        dcur.swap(dnext);
        break;
      }
      case LayerKind::FeatureTap:
        break;
    }
  }
}

template <typename T>
T softmax_ce(const std::vector<T>& logits, int batch, int n_classes, const int* labels,
             std::vector<T>* dlogits) {
  if (static_cast<int64_t>(logits.size()) != static_cast<int64_t>(batch) * n_classes)
    throw std::invalid_argument("softmax_ce: logits size mismatch");
  if (dlogits) dlogits->assign(logits.size(), T(0));
  T loss = T(0);
  for (int b = 0; b < batch; ++b) {
    const T* row = logits.data() + static_cast<size_t>(b) * n_classes;
    int y = labels[b];
    if (y < 0 || y >= n_classes) throw std::invalid_argument("softmax_ce: label out of range");
    T mx = row[0];
    for (int k = 1; k < n_classes; ++k) mx = std::max(mx, row[k]);
    T denom = T(0);
    for (int k = 0; k < n_classes; ++k) denom += std::exp(row[k] - mx);
    loss -= (row[y] - mx) - std::log(denom);
    if (dlogits) {
      T* drow = dlogits->data() + static_cast<size_t>(b) * n_classes;
      for (int k = 0; k < n_classes; ++k)
        drow[k] = (std::exp(row[k] - mx) / denom - (k == y ? T(1) : T(0))) / static_cast<T>(batch);
    }
  }
  return loss / static_cast<T>(batch);
}

template <typename T>
T fedprox_penalty(const std::vector<T>& params, const std::vector<T>& prev, T mu) {
  if (mu == T(0)) return T(0);
  if (params.size() != prev.size())
    throw std::invalid_argument("fedprox_penalty: size mismatch");
  T s = T(0);
  for (size_t i = 0; i < params.size(); ++i) {
    T d = params[i] - prev[i];
    s += d * d;
  }
  return mu / T(2) * s;
}

template <typename T>
T l2_penalty(const std::vector<T>& params, T lambda) {
  if (lambda == T(0)) return T(0);
  T s = T(0);
  for (T v : params) s += v * v;
  return lambda * s;
}

template <typename T>
T loss_fedprox(const std::vector<T>& logits, int batch, int n_classes, const int* labels,
               const std::vector<T>& params, const std::vector<T>& prev, T mu, T lambda) {
  return softmax_ce<T>(logits, batch, n_classes, labels, nullptr) +
         fedprox_penalty(params, prev, mu) + l2_penalty(params, lambda);
}

template <typename T>
void add_penalty_grads(const std::vector<T>& params, const std::vector<T>& prev, T mu, T lambda,
                       std::vector<T>* grad) {
  if (grad->size() != params.size())
    throw std::invalid_argument("add_penalty_grads: size mismatch");
  if (mu != T(0) && params.size() != prev.size())
    throw std::invalid_argument("add_penalty_grads: prev size mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    T g = T(2) * lambda * params[i];
    if (mu != T(0)) g += mu * (params[i] - prev[i]);
    (*grad)[i] += g;
  }
}

template <typename T>
void sgd_momentum_step(std::vector<T>& params, const std::vector<T>& grad,
                       std::vector<T>& velocity, T lr, T momentum) {
  if (params.size() != grad.size() || params.size() != velocity.size())
    throw std::invalid_argument("sgd_momentum_step: size mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    params[i] -= lr * velocity[i];
  }
}

template class Net<float>;
template class Net<double>;
template float softmax_ce<float>(const std::vector<float>&, int, int, const int*,
                                 std::vector<float>*);
template double softmax_ce<double>(const std::vector<double>&, int, int, const int*,
                                   std::vector<double>*);
template float fedprox_penalty<float>(const std::vector<float>&, const std::vector<float>&, float);
template double fedprox_penalty<double>(const std::vector<double>&, const std::vector<double>&,
                                        double);
template float l2_penalty<float>(const std::vector<float>&, float);
template double l2_penalty<double>(const std::vector<double>&, double);
template float loss_fedprox<float>(const std::vector<float>&, int, int, const int*,
                                   const std::vector<float>&, const std::vector<float>&, float,
                                   float);
template double loss_fedprox<double>(const std::vector<double>&, int, int, const int*,
                                     const std::vector<double>&, const std::vector<double>&,
                                     double, double);
template void add_penalty_grads<float>(const std::vector<float>&, const std::vector<float>&, float,
                                       float, std::vector<float>*);
template void add_penalty_grads<double>(const std::vector<double>&, const std::vector<double>&,
                                        double, double, std::vector<double>*);
template void sgd_momentum_step<float>(std::vector<float>&, const std::vector<float>&,
                                       std::vector<float>&, float, float);
template void sgd_momentum_step<double>(std::vector<double>&, const std::vector<double>&,
                                        std::vector<double>&, double, double);

}  // namespace qahfl
