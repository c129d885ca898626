#include "qahfl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace qahfl {
namespace {

uint32_t read_u32_be(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw IdxError(IdxError::Kind::Truncated, path + ": truncated header");
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

double point_segment_dist(double px, double py, double x0, double y0, double x1, double y1) {
  double dx = x1 - x0, dy = y1 - y0;
  double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - x0) * dx + (py - y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  double ex = px - (x0 + t * dx), ey = py - (y0 + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

struct Pt {
  double x, y;
};
using Stroke = std::vector<Pt>;  // polyline, unit-box coordinates with y down

// Builds the stroke set of one digit glyph. Shapes mimic handwriting rather
// than a segment display: curves, loops, and slanted strokes give each class
// its own mix of local orientation and curvature, which is what a small
// convolutional net keys on. Control points get a little jitter so no two
// glyphs are identical.
std::vector<Stroke> digit_strokes(int digit, Rng& rng) {
  auto j = [&rng](double u, double v) {
    return Pt{u + rng.uniform(-0.02, 0.02), v + rng.uniform(-0.02, 0.02)};
  };
  auto line = [](Pt a, Pt b) { return Stroke{a, b}; };
  // Quadratic Bezier sampled into a polyline.
  auto quad = [](Pt a, Pt c, Pt b) {
    Stroke s;
    for (int k = 0; k <= 8; ++k) {
      double t = k / 8.0, u = 1.0 - t;
      s.push_back({u * u * a.x + 2 * u * t * c.x + t * t * b.x,
                   u * u * a.y + 2 * u * t * c.y + t * t * b.y});
    }
    return s;
  };
  auto oval = [&rng](double cx, double cy, double rx, double ry) {
    Stroke s;
    double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    for (int k = 0; k <= 16; ++k) {
      double t = phase + 2.0 * 3.14159265358979323846 * k / 16.0;
      s.push_back({cx + rx * std::cos(t), cy + ry * std::sin(t)});
    }
    return s;
  };

  std::vector<Stroke> out;
  switch (digit) {
    case 0:
      out.push_back(oval(0.5, 0.5, 0.30 + rng.uniform(-0.03, 0.03), 0.44 + rng.uniform(-0.03, 0.03)));
      break;
    case 1:
      out.push_back(line(j(0.32, 0.22), j(0.54, 0.06)));
      out.push_back(line(j(0.54, 0.06), j(0.50, 0.95)));
      break;
    case 2:
      out.push_back(quad(j(0.16, 0.28), j(0.50, -0.10), j(0.82, 0.30)));
      out.push_back(quad(j(0.82, 0.30), j(0.60, 0.62), j(0.16, 0.94)));
      out.push_back(line(j(0.16, 0.94), j(0.85, 0.94)));
      break;
    case 3:
      out.push_back(quad(j(0.20, 0.10), j(0.88, 0.06), j(0.50, 0.46)));
      out.push_back(quad(j(0.50, 0.46), j(0.98, 0.62), j(0.22, 0.93)));
      break;
    case 4:
      out.push_back(line(j(0.62, 0.06), j(0.14, 0.60)));
      out.push_back(line(j(0.14, 0.60), j(0.88, 0.60)));
      out.push_back(line(j(0.66, 0.34), j(0.60, 0.95)));
      break;
    case 5:
      out.push_back(line(j(0.80, 0.06), j(0.26, 0.06)));
      out.push_back(line(j(0.26, 0.06), j(0.22, 0.44)));
      out.push_back(quad(j(0.22, 0.44), j(0.95, 0.56), j(0.28, 0.94)));
      break;
    case 6:
      out.push_back(quad(j(0.72, 0.06), j(0.34, 0.22), j(0.25, 0.58)));
      out.push_back(oval(0.5, 0.72, 0.25 + rng.uniform(-0.02, 0.02), 0.22 + rng.uniform(-0.02, 0.02)));
      break;
    case 7:
      out.push_back(line(j(0.15, 0.08), j(0.86, 0.08)));
      out.push_back(quad(j(0.86, 0.08), j(0.58, 0.50), j(0.36, 0.95)));
      break;
    case 8:
      out.push_back(oval(0.5, 0.27, 0.23 + rng.uniform(-0.02, 0.02), 0.21 + rng.uniform(-0.02, 0.02)));
      out.push_back(oval(0.5, 0.72, 0.28 + rng.uniform(-0.02, 0.02), 0.25 + rng.uniform(-0.02, 0.02)));
      break;
    default:  // 9
      out.push_back(oval(0.48, 0.30, 0.25 + rng.uniform(-0.02, 0.02), 0.23 + rng.uniform(-0.02, 0.02)));
      out.push_back(quad(j(0.73, 0.34), j(0.74, 0.66), j(0.54, 0.95)));
      break;
  }
  return out;
}

}  // namespace

std::vector<LabeledExample> load_mnist_idx(const std::string& images_path,
                                           const std::string& labels_path, size_t limit) {
  std::ifstream imgf(images_path, std::ios::binary);
  if (!imgf) throw IdxError(IdxError::Kind::OpenFailed, "cannot open " + images_path);
  std::ifstream labf(labels_path, std::ios::binary);
  if (!labf) throw IdxError(IdxError::Kind::OpenFailed, "cannot open " + labels_path);

  if (read_u32_be(imgf, images_path) != 0x00000803)
    throw IdxError(IdxError::Kind::BadMagic, images_path + ": not an IDX image file");
  if (read_u32_be(labf, labels_path) != 0x00000801)
    throw IdxError(IdxError::Kind::BadMagic, labels_path + ": not an IDX label file");

  uint32_t n_images = read_u32_be(imgf, images_path);
  uint32_t rows = read_u32_be(imgf, images_path);
  uint32_t cols = read_u32_be(imgf, images_path);
  uint32_t n_labels = read_u32_be(labf, labels_path);
  if (n_images != n_labels)
    throw IdxError(IdxError::Kind::CountMismatch,
                   images_path + ": " + std::to_string(n_images) + " images vs " +
                       std::to_string(n_labels) + " labels");

  size_t n = n_images;
  if (limit > 0) n = std::min(n, limit);
  std::vector<LabeledExample> out;
  out.reserve(n);
  std::vector<unsigned char> buf(static_cast<size_t>(rows) * cols);
  for (size_t i = 0; i < n; ++i) {
    if (!imgf.read(reinterpret_cast<char*>(buf.data()), buf.size()))
      throw IdxError(IdxError::Kind::Truncated, images_path + ": truncated pixel data");
    char lab;
    if (!labf.get(lab))
      throw IdxError(IdxError::Kind::Truncated, labels_path + ": truncated label data");
    if (static_cast<unsigned char>(lab) > 9)
      throw IdxError(IdxError::Kind::BadValue,
                     labels_path + ": label out of range at index " + std::to_string(i));
    LabeledExample ex;
    ex.image = Image(static_cast<int>(rows), static_cast<int>(cols));
    for (size_t p = 0; p < buf.size(); ++p) ex.image.pix[p] = buf[p] / 255.0;
    ex.label = static_cast<unsigned char>(lab);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<LabeledExample> synth_digits(size_t n, Rng& rng) {
  std::vector<LabeledExample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    int digit = static_cast<int>(i % 10);
    // Per-image placement jitter. Glyph boxes roughly fill the canvas the way
    // centered handwriting does; strokes stay soft-edged and mid-contrast so
    // the degradation pipeline lands inside the documented PSNR bands instead
    // of wiping the digit out entirely.
    double box_w = rng.uniform(15.0, 19.0);
    double box_h = rng.uniform(19.0, 23.0);
    double cx = 14.0 + rng.uniform(-1.2, 1.2);
    double cy = 14.0 + rng.uniform(-1.2, 1.2);
    double angle = rng.uniform(-0.08, 0.08);
    double shear = rng.uniform(-0.10, 0.10);
    double thick = rng.uniform(1.0, 1.3);
    double fall = 2.2;
    double peak = rng.uniform(0.62, 0.75);
    double ca = std::cos(angle), sa = std::sin(angle);

    // Glyph strokes to canvas coordinates: shear, scale, rotate, translate.
    std::vector<Stroke> strokes = digit_strokes(digit, rng);
    for (Stroke& s : strokes)
      for (Pt& p : s) {
        double x = (p.x - 0.5 + shear * (0.5 - p.y)) * box_w;
        double y = (p.y - 0.5) * box_h;
        p = {cx + ca * x - sa * y, cy + sa * x + ca * y};
      }

    // Per-stroke bounding boxes let the rasterizer skip far-away strokes.
    std::vector<std::array<double, 4>> bbox;
    double reach = thick + fall;
    for (const Stroke& s : strokes) {
      std::array<double, 4> b{1e9, 1e9, -1e9, -1e9};
      for (const Pt& p : s) {
        b[0] = std::min(b[0], p.x - reach);
        b[1] = std::min(b[1], p.y - reach);
        b[2] = std::max(b[2], p.x + reach);
        b[3] = std::max(b[3], p.y + reach);
      }
      bbox.push_back(b);
    }

    LabeledExample ex;
    ex.label = digit;
    ex.image = Image(28, 28);
    for (int y = 0; y < 28; ++y) {
      for (int x = 0; x < 28; ++x) {
        double best = std::numeric_limits<double>::max();
        for (size_t k = 0; k < strokes.size(); ++k) {
          const auto& b = bbox[k];
          if (x < b[0] || x > b[2] || y < b[1] || y > b[3]) continue;
          const Stroke& s = strokes[k];
          for (size_t q = 0; q + 1 < s.size(); ++q)
            best = std::min(best, point_segment_dist(x, y, s[q].x, s[q].y, s[q + 1].x, s[q + 1].y));
        }
        double v = 0.0;
        if (best <= thick)
          v = 1.0;
        else if (best < thick + fall)
          v = (thick + fall - best) / fall;
        ex.image.at(y, x) = peak * v;
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

double gini_of_counts(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("gini_of_counts: empty input");
  double total = 0.0;
  for (double v : values) {
    if (v < 0) throw std::invalid_argument("gini_of_counts: negative value");
    total += v;
  }
  if (total == 0.0) return 0.0;
  double n = static_cast<double>(values.size());
  double diff_sum = 0.0;
  for (double a : values)
    for (double b : values) diff_sum += std::abs(a - b);
  return diff_sum / (2.0 * n * n * (total / n));
}

FederationPlan make_plan(const std::vector<LabeledExample>& examples, const PlanConfig& cfg,
                         uint64_t master_seed) {
  if (cfg.n_clients < 3) throw std::invalid_argument("make_plan: need at least 3 clients");
  if (cfg.primary_share < 0.5 || cfg.primary_share > 1.0)
    throw std::invalid_argument("make_plan: primary_share must be in [0.5, 1]");
  if (cfg.primary_classes < 1 || cfg.primary_classes > 10)
    throw std::invalid_argument("make_plan: primary_classes must be in [1, 10]");
  if (cfg.size_min < 1 || cfg.size_max < cfg.size_min)
    throw std::invalid_argument("make_plan: bad size range");
  double fsum = cfg.fractions.low + cfg.fractions.medium + cfg.fractions.high;
  if (std::abs(fsum - 1.0) > 1e-9)
    throw std::invalid_argument("make_plan: tier fractions must sum to 1");
  if (examples.size() < static_cast<size_t>(cfg.n_clients) * cfg.size_min)
    throw std::invalid_argument("make_plan: not enough examples for " +
                                std::to_string(cfg.n_clients) + " clients of at least " +
                                std::to_string(cfg.size_min));

  SeedTree root = SeedTree(master_seed).child("plan");
  Rng rng = root.rng();

  // Tier counts by largest remainder, then force every tier non-empty.
  std::array<double, 3> frac = {cfg.fractions.low, cfg.fractions.medium, cfg.fractions.high};
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (int t = 0; t < 3; ++t) {
    double exact = frac[t] * cfg.n_clients;
    counts[t] = static_cast<int>(std::floor(exact));
    rem[t] = exact - counts[t];
    assigned += counts[t];
  }
  while (assigned < cfg.n_clients) {
    int best = 0;
    for (int t = 1; t < 3; ++t)
      if (rem[t] > rem[best]) best = t;
    ++counts[best];
    rem[best] = -1;
    ++assigned;
  }
  for (int t = 0; t < 3; ++t) {
    while (counts[t] == 0) {
      int donor = 0;
      for (int u = 1; u < 3; ++u)
        if (counts[u] > counts[donor]) donor = u;
      --counts[donor];
      ++counts[t];
    }
  }

  // Shard sizes, capped so every later client can still reach size_min.
  size_t budget = examples.size();
  std::vector<int> sizes(cfg.n_clients);
  for (int i = 0; i < cfg.n_clients; ++i) {
    int left = cfg.n_clients - i - 1;
    uint64_t cap = budget - static_cast<uint64_t>(left) * cfg.size_min;
    int want = cfg.size_min + static_cast<int>(rng.below(cfg.size_max - cfg.size_min + 1));
    sizes[i] = static_cast<int>(std::min<uint64_t>(want, cap));
    budget -= sizes[i];
  }

  // Per-class index pools, shuffled once.
  std::array<std::vector<int>, 10> pools;
  for (size_t i = 0; i < examples.size(); ++i) {
    int lab = examples[i].label;
    if (lab < 0 || lab > 9) throw std::invalid_argument("make_plan: label out of range");
    pools[lab].push_back(static_cast<int>(i));
  }
  for (auto& p : pools) rng.shuffle(p);

  FederationPlan plan;
  plan.seed = master_seed;
  plan.tier_counts = counts;
  std::array<long double, 3> psnr_sum{};
  std::array<int, 3> psnr_n{};

  auto draw_from = [&](const std::vector<int>& classes) -> int {
    // Uniform pick among the given classes that still have examples left.
    std::vector<int> avail;
    for (int c : classes)
      if (!pools[c].empty()) avail.push_back(c);
    if (avail.empty()) return -1;
    int c = avail[rng.below(avail.size())];
    int idx = pools[c].back();
    pools[c].pop_back();
    return idx;
  };

  std::vector<int> all_classes(10);
  std::iota(all_classes.begin(), all_classes.end(), 0);

  for (int i = 0; i < cfg.n_clients; ++i) {
    ClientDataset cd;
    cd.client_id = i;
    cd.tier = i < counts[0] ? QualityTier::Low
                            : (i < counts[0] + counts[1] ? QualityTier::Medium : QualityTier::High);

    int k = cfg.primary_classes;
    std::vector<int> classes = all_classes;
    rng.shuffle(classes);
    cd.primary_classes.assign(classes.begin(), classes.begin() + k);
    std::sort(cd.primary_classes.begin(), cd.primary_classes.end());
    std::vector<int> secondary(classes.begin() + k, classes.end());

    int n_primary = static_cast<int>(std::llround(sizes[i] * cfg.primary_share));
    for (int j = 0; j < sizes[i]; ++j) {
      bool want_primary = j < n_primary;
      int idx = draw_from(want_primary ? cd.primary_classes : secondary);
      if (idx < 0) idx = draw_from(want_primary ? secondary : cd.primary_classes);
      if (idx < 0) throw std::logic_error("make_plan: pools exhausted despite budget check");
      cd.examples.push_back(examples[idx]);
    }

    if (cfg.apply_degrade) {
      Rng drng = root.child("degrade").child(static_cast<uint64_t>(i)).rng();
      for (LabeledExample& ex : cd.examples) {
        QualityTier t = cfg.tier_matched_degrade
                            ? cd.tier
                            : kAllTiers[static_cast<size_t>(drng.below(3))];
        Image degraded = degrade(ex.image, t, drng, cfg.degrade);
        double p = psnr(ex.image, degraded);
        int ti = tier_index(t);
        psnr_sum[ti] += p;
        ++psnr_n[ti];
        ex.image = std::move(degraded);
      }
    }
    plan.clients.push_back(std::move(cd));
  }

  for (int t = 0; t < 3; ++t)
    plan.tier_psnr_mean[t] = psnr_n[t] > 0
                                 ? static_cast<double>(psnr_sum[t] / psnr_n[t])
                                 : std::numeric_limits<double>::quiet_NaN();

  // Inequality over the flattened client x class count matrix.
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(cfg.n_clients) * 10);
  for (const ClientDataset& cd : plan.clients) {
    std::array<double, 10> per_class{};
    for (const LabeledExample& ex : cd.examples) per_class[ex.label] += 1.0;
    for (double v : per_class) flat.push_back(v);
  }
  plan.gini = gini_of_counts(flat);
  return plan;
}

}  // namespace qahfl
