#include "qahfl/image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace qahfl {
namespace {

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

// 1-D area resample of `src` (length n) to length m <= n. Each output cell
// averages the source interval [i*n/m, (i+1)*n/m) with fractional end weights.
void area_resample_line(const double* src, int n, double* dst, int m) {
  double scale = static_cast<double>(n) / m;
  for (int i = 0; i < m; ++i) {
    double lo = i * scale;
    double hi = (i + 1) * scale;
    double acc = 0.0;
    int first = static_cast<int>(std::floor(lo));
    int last = static_cast<int>(std::ceil(hi)) - 1;
    last = std::min(last, n - 1);
    for (int k = first; k <= last; ++k) {
      double cell_lo = std::max(lo, static_cast<double>(k));
      double cell_hi = std::min(hi, static_cast<double>(k + 1));
      if (cell_hi > cell_lo) acc += src[k] * (cell_hi - cell_lo);
    }
    dst[i] = acc / scale;
  }
}

// 1-D bilinear resample with half-pixel centers, clamped at the borders.
void linear_resample_line(const double* src, int n, double* dst, int m) {
  double scale = static_cast<double>(n) / m;
  for (int i = 0; i < m; ++i) {
    double x = (i + 0.5) * scale - 0.5;
    x = std::clamp(x, 0.0, static_cast<double>(n - 1));
    int x0 = static_cast<int>(std::floor(x));
    int x1 = std::min(x0 + 1, n - 1);
    double f = x - x0;
    dst[i] = src[x0] * (1.0 - f) + src[x1] * f;
  }
}

using LineResampler = void (*)(const double*, int, double*, int);

Image resample(const Image& img, int out_h, int out_w, LineResampler fn) {
  // Rows first, then columns, both with the same 1-D kernel.
  Image mid(img.height, out_w);
  std::vector<double> row(img.width), out_row(out_w);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) row[x] = img.at(y, x);
    fn(row.data(), img.width, out_row.data(), out_w);
    for (int x = 0; x < out_w; ++x) mid.at(y, x) = out_row[x];
  }
  Image out(out_h, out_w);
  std::vector<double> col(img.height), out_col(out_h);
  for (int x = 0; x < out_w; ++x) {
    for (int y = 0; y < img.height; ++y) col[y] = mid.at(y, x);
    fn(col.data(), img.height, out_col.data(), out_h);
    for (int y = 0; y < out_h; ++y) out.at(y, x) = out_col[y];
  }
  return out;
}

// Orthonormal DCT-II basis for 4-point blocks: B[u][x] = c(u) cos((2x+1)u pi / 8).
struct Dct4 {
  double b[4][4];
  Dct4() {
    const double pi = 3.14159265358979323846;
    for (int u = 0; u < 4; ++u) {
      double c = (u == 0) ? std::sqrt(0.25) : std::sqrt(0.5);
      for (int x = 0; x < 4; ++x) b[u][x] = c * std::cos((2 * x + 1) * u * pi / 8.0);
    }
  }
};

}  // namespace

const char* tier_name(QualityTier t) {
  switch (t) {
    case QualityTier::Low: return "low";
    case QualityTier::Medium: return "medium";
    case QualityTier::High: return "high";
  }
  return "?";
}

QualityTier tier_from_name(const std::string& name) {
  if (name == "low") return QualityTier::Low;
  if (name == "medium" || name == "mid") return QualityTier::Medium;
  if (name == "high") return QualityTier::High;
  throw std::invalid_argument("unknown tier name: " + name);
}

Image downscale_upscale(const Image& img, double factor) {
  if (factor <= 0.0 || factor > 1.0)
    throw std::invalid_argument("downscale_upscale: factor must be in (0, 1]");
  if (factor == 1.0) return img;
  int small_h = std::max(1, static_cast<int>(std::ceil(factor * img.height)));
  int small_w = std::max(1, static_cast<int>(std::ceil(factor * img.width)));
  Image small = resample(img, small_h, small_w, area_resample_line);
  Image out = resample(small, img.height, img.width, linear_resample_line);
  for (double& v : out.pix) v = clip01(v);
  return out;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  for (int k = -radius; k <= radius; ++k)
    kernel[k + radius] = std::exp(-(static_cast<double>(k) * k) / (2.0 * sigma * sigma));
  double ksum = 0.0;
  for (double v : kernel) ksum += v;
  for (double& v : kernel) v /= ksum;

  // Horizontal then vertical pass. Near the border the kernel is truncated
  // and renormalized over the taps that remain inside.
  Image mid(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0, wsum = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        int xx = x + k;
        if (xx < 0 || xx >= img.width) continue;
        acc += kernel[k + radius] * img.at(y, xx);
        wsum += kernel[k + radius];
      }
      mid.at(y, x) = acc / wsum;
    }
  }
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0, wsum = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        int yy = y + k;
        if (yy < 0 || yy >= img.height) continue;
        acc += kernel[k + radius] * mid.at(yy, x);
        wsum += kernel[k + radius];
      }
      out.at(y, x) = clip01(acc / wsum);
    }
  }
  return out;
}

Image compression_artifacts(const Image& img, double quant_step) {
  if (quant_step < 0.0) throw std::invalid_argument("compression_artifacts: negative step");
  if (quant_step == 0.0) return img;
  static const Dct4 dct;

  int ph = (img.height + 3) / 4 * 4;
  int pw = (img.width + 3) / 4 * 4;
  auto padded_at = [&](int y, int x) {
    return img.at(std::min(y, img.height - 1), std::min(x, img.width - 1));
  };

  Image out(img.height, img.width);
  double block[4][4], coef[4][4], tmp[4][4];
  for (int by = 0; by < ph; by += 4) {
    for (int bx = 0; bx < pw; bx += 4) {
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) block[y][x] = padded_at(by + y, bx + x);
      // coef = B * block * B^T
      for (int u = 0; u < 4; ++u)
        for (int x = 0; x < 4; ++x) {
          double s = 0.0;
          for (int y = 0; y < 4; ++y) s += dct.b[u][y] * block[y][x];
          tmp[u][x] = s;
        }
      for (int u = 0; u < 4; ++u)
        for (int v = 0; v < 4; ++v) {
          double s = 0.0;
          for (int x = 0; x < 4; ++x) s += tmp[u][x] * dct.b[v][x];
          // Uniform quantization, ties to even so the rounding is symmetric.
          coef[u][v] = quant_step * std::nearbyint(s / quant_step);
        }
      // block = B^T * coef * B
      for (int y = 0; y < 4; ++y)
        for (int v = 0; v < 4; ++v) {
          double s = 0.0;
          for (int u = 0; u < 4; ++u) s += dct.b[u][y] * coef[u][v];
          tmp[y][v] = s;
        }
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
          double s = 0.0;
          for (int v = 0; v < 4; ++v) s += tmp[y][v] * dct.b[v][x];
          int oy = by + y, ox = bx + x;
          if (oy < img.height && ox < img.width) out.at(oy, ox) = clip01(s);
        }
    }
  }
  return out;
}

Image add_gaussian_noise(const Image& img, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("add_gaussian_noise: negative sigma");
  Image out = img;
  if (sigma == 0.0) return out;
  for (double& v : out.pix) v = clip01(v + sigma * rng.gaussian());
  return out;
}

Image degrade(const Image& img, QualityTier tier, Rng& rng, const DegradeParams& p) {
  switch (tier) {
    case QualityTier::Low: {
      Image x = downscale_upscale(img, p.low_scale);
      x = gaussian_blur(x, p.low_blur_sigma);
      x = compression_artifacts(x, p.low_quant_step);
      return add_gaussian_noise(x, p.low_noise_sigma, rng);
    }
    case QualityTier::Medium: {
      Image x = downscale_upscale(img, p.med_scale);
      x = gaussian_blur(x, p.med_blur_sigma);
      return add_gaussian_noise(x, p.med_noise_sigma, rng);
    }
    case QualityTier::High:
      return p.high_noise_sigma > 0.0 ? add_gaussian_noise(img, p.high_noise_sigma, rng) : img;
  }
  throw std::logic_error("degrade: bad tier");
}

double psnr(const Image& reference, const Image& test) {
  if (reference.height != test.height || reference.width != test.width)
    throw std::invalid_argument("psnr: dimension mismatch");
  double mse = 0.0;
  for (size_t i = 0; i < reference.pix.size(); ++i) {
    double d = reference.pix[i] - test.pix[i];
    mse += d * d;
  }
  mse /= static_cast<double>(reference.pix.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace qahfl
