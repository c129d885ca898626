#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "qahfl/dataset.hpp"

using namespace qahfl;

namespace {

// Independent oracle for the gini value: the sorted-rank formula
// G = (2 sum i*v_(i)) / (n sum v) - (n + 1) / n.
double gini_sorted_oracle(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double total = 0.0, weighted = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    total += v[i];
    weighted += static_cast<double>(i + 1) * v[i];
  }
  double n = static_cast<double>(v.size());
  return 2.0 * weighted / (n * total) - (n + 1.0) / n;
}

void write_be32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<char*>(b), 4);
}

struct IdxFixture {
  std::filesystem::path dir;
  std::string images, labels;

  explicit IdxFixture(const std::string& tag) {
    dir = std::filesystem::temp_directory_path() / ("qahfl_idx_" + tag);
    std::filesystem::create_directories(dir);
    images = (dir / "images.idx").string();
    labels = (dir / "labels.idx").string();
  }
  ~IdxFixture() { std::filesystem::remove_all(dir); }

  // 3 images of 2x2 with pixel value = 50*i, labels 7, 0, 9.
  void write_valid(uint32_t n_images = 3, uint32_t n_labels = 3, bool truncate_pixels = false,
                   uint32_t image_magic = 0x00000803, unsigned char third_label = 9) {
    std::ofstream fi(images, std::ios::binary);
    write_be32(fi, image_magic);
    write_be32(fi, n_images);
    write_be32(fi, 2);
    write_be32(fi, 2);
    size_t n_pix = 4 * n_images - (truncate_pixels ? 2 : 0);
    for (size_t p = 0; p < n_pix; ++p) fi.put(static_cast<char>(50 * (p / 4)));
    fi.close();
    std::ofstream fl(labels, std::ios::binary);
    write_be32(fl, 0x00000801);
    write_be32(fl, n_labels);
    unsigned char labs[3] = {7, 0, third_label};
    for (uint32_t i = 0; i < n_labels && i < 3; ++i) fl.put(static_cast<char>(labs[i]));
  }
};

}  // namespace

TEST_CASE("gini of a one-hot vector of length 4 is 0.75") {
  CHECK(gini_of_counts({0, 0, 0, 1}) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("gini of uniform counts is zero") {
  CHECK(gini_of_counts({5, 5, 5, 5, 5}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(gini_of_counts({0, 0, 0}) == 0.0);  // all-zero defined as perfectly equal
}

TEST_CASE("gini matches the sorted-rank formula on random vectors") {
  Rng rng(404);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> v(30);
    for (double& x : v) x = std::floor(rng.uniform(0, 50));
    if (std::accumulate(v.begin(), v.end(), 0.0) == 0.0) v[0] = 1;
    CHECK(gini_of_counts(v) == doctest::Approx(gini_sorted_oracle(v)).epsilon(1e-9));
  }
}

TEST_CASE("gini rejects bad input") {
  CHECK_THROWS_AS(gini_of_counts({}), std::invalid_argument);
  CHECK_THROWS_AS(gini_of_counts({1, -2, 3}), std::invalid_argument);
}

TEST_CASE("synthetic digits are balanced, bounded and reproducible") {
  Rng a(12), b(12);
  auto d1 = synth_digits(100, a);
  auto d2 = synth_digits(100, b);
  REQUIRE(d1.size() == 100);
  std::array<int, 10> counts{};
  double ink = 0.0;
  for (const auto& ex : d1) {
    ++counts[ex.label];
    CHECK(ex.image.height == 28);
    CHECK(ex.image.width == 28);
    for (double v : ex.image.pix) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
      ink += v;
    }
  }
  for (int c : counts) CHECK(c == 10);
  // Plausible amount of ink per image: not blank, not a filled canvas.
  double mean_ink = ink / (100 * 784);
  CHECK(mean_ink > 0.05);
  CHECK(mean_ink < 0.35);
  // Deterministic given the stream, but jitter separates repeats of a digit.
  for (int i = 0; i < 100; ++i) CHECK(d1[i].image.pix == d2[i].image.pix);
  CHECK(d1[0].image.pix != d1[10].image.pix);
}

TEST_CASE("idx loader reads a valid pair") {
  IdxFixture fx("ok");
  fx.write_valid();
  auto data = load_mnist_idx(fx.images, fx.labels);
  REQUIRE(data.size() == 3);
  CHECK(data[0].label == 7);
  CHECK(data[1].label == 0);
  CHECK(data[2].label == 9);
  CHECK(data[1].image.at(0, 0) == doctest::Approx(50 / 255.0));
  CHECK(data[2].image.at(1, 1) == doctest::Approx(100 / 255.0));
  auto limited = load_mnist_idx(fx.images, fx.labels, 2);
  CHECK(limited.size() == 2);
}

TEST_CASE("idx loader reports each failure mode distinctly") {
  {
    IdxFixture fx("missing");
    try {
      load_mnist_idx(fx.images + ".nope", fx.labels);
      FAIL("expected IdxError");
    } catch (const IdxError& e) {
      CHECK(e.kind == IdxError::Kind::OpenFailed);
    }
  }
  {
    IdxFixture fx("magic");
    fx.write_valid(3, 3, false, 0xdeadbeef);
    try {
      load_mnist_idx(fx.images, fx.labels);
      FAIL("expected IdxError");
    } catch (const IdxError& e) {
      CHECK(e.kind == IdxError::Kind::BadMagic);
    }
  }
  {
    IdxFixture fx("trunc");
    fx.write_valid(3, 3, true);
    try {
      load_mnist_idx(fx.images, fx.labels);
      FAIL("expected IdxError");
    } catch (const IdxError& e) {
      CHECK(e.kind == IdxError::Kind::Truncated);
    }
  }
  {
    IdxFixture fx("count");
    fx.write_valid(3, 2);
    try {
      load_mnist_idx(fx.images, fx.labels);
      FAIL("expected IdxError");
    } catch (const IdxError& e) {
      CHECK(e.kind == IdxError::Kind::CountMismatch);
    }
  }
  {
    IdxFixture fx("label");
    fx.write_valid(3, 3, false, 0x00000803, 12);
    try {
      load_mnist_idx(fx.images, fx.labels);
      FAIL("expected IdxError");
    } catch (const IdxError& e) {
      CHECK(e.kind == IdxError::Kind::BadValue);
    }
  }
}

TEST_CASE("default plan partitions into the expected tier layout") {
  Rng rng(2024);
  auto corpus = synth_digits(8000, rng);
  PlanConfig cfg;
  FederationPlan plan = make_plan(corpus, cfg, 42);

  REQUIRE(plan.clients.size() == 20);
  CHECK(plan.tier_counts[0] == 6);
  CHECK(plan.tier_counts[1] == 8);
  CHECK(plan.tier_counts[2] == 6);

  size_t total = 0;
  int primary_hits = 0, n_examples = 0;
  for (const auto& cd : plan.clients) {
    CHECK(cd.size() >= 240);
    CHECK(cd.size() <= 500);
    total += cd.size();
    REQUIRE(!cd.primary_classes.empty());
    CHECK(cd.primary_classes.size() <= 3);
    for (const auto& ex : cd.examples) {
      ++n_examples;
      if (std::find(cd.primary_classes.begin(), cd.primary_classes.end(), ex.label) !=
          cd.primary_classes.end())
        ++primary_hits;
      for (double v : ex.image.pix) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
      }
    }
  }
  CHECK(total <= corpus.size());
  // 20 clients drain whole class pools, so the achieved share sits below the
  // requested 0.8 but the skew must still dominate the uniform 30%.
  CHECK(static_cast<double>(primary_hits) / n_examples > 0.55);

  // Tier ordering of clients: low ids first, high ids last.
  CHECK(plan.clients[0].tier == QualityTier::Low);
  CHECK(plan.clients[7].tier == QualityTier::Medium);
  CHECK(plan.clients[19].tier == QualityTier::High);

  // Degradation damage ordered by tier; the high tier is untouched.
  CHECK(plan.tier_psnr_mean[0] < plan.tier_psnr_mean[1]);
  CHECK(std::isinf(plan.tier_psnr_mean[2]));

  // Skewed but not degenerate label split.
  CHECK(plan.gini > 0.3);
  CHECK(plan.gini < 0.8);
}

TEST_CASE("primary share is honored when class pools have headroom") {
  Rng rng(77);
  auto corpus = synth_digits(8000, rng);
  PlanConfig cfg;
  cfg.n_clients = 8;
  cfg.apply_degrade = false;
  FederationPlan plan = make_plan(corpus, cfg, 3);
  int primary_hits = 0, n_examples = 0;
  for (const auto& cd : plan.clients)
    for (const auto& ex : cd.examples) {
      ++n_examples;
      if (std::find(cd.primary_classes.begin(), cd.primary_classes.end(), ex.label) !=
          cd.primary_classes.end())
        ++primary_hits;
    }
  CHECK(static_cast<double>(primary_hits) / n_examples ==
        doctest::Approx(0.8).epsilon(0.02));
}

TEST_CASE("plans are deterministic in the seed") {
  Rng rng(2024);
  auto corpus = synth_digits(3000, rng);
  PlanConfig cfg;
  cfg.n_clients = 8;
  FederationPlan p1 = make_plan(corpus, cfg, 7);
  FederationPlan p2 = make_plan(corpus, cfg, 7);
  FederationPlan p3 = make_plan(corpus, cfg, 8);
  REQUIRE(p1.clients.size() == p2.clients.size());
  bool all_same = true;
  for (size_t i = 0; i < p1.clients.size(); ++i) {
    REQUIRE(p1.clients[i].size() == p2.clients[i].size());
    CHECK(p1.clients[i].primary_classes == p2.clients[i].primary_classes);
    for (size_t j = 0; j < p1.clients[i].examples.size(); ++j) {
      CHECK(p1.clients[i].examples[j].label == p2.clients[i].examples[j].label);
      CHECK(p1.clients[i].examples[j].image.pix == p2.clients[i].examples[j].image.pix);
    }
  }
  for (size_t i = 0; i < p1.clients.size() && all_same; ++i)
    all_same = p1.clients[i].size() == p3.clients[i].size() &&
               p1.clients[i].primary_classes == p3.clients[i].primary_classes;
  CHECK_FALSE(all_same);
}

TEST_CASE("unmatched degradation decouples quality from tier") {
  Rng rng(55);
  auto corpus = synth_digits(2000, rng);
  PlanConfig cfg;
  cfg.n_clients = 4;
  cfg.tier_matched_degrade = false;
  FederationPlan plan = make_plan(corpus, cfg, 11);
  // Per-image random tiers: every damage class appears somewhere.
  CHECK(std::isfinite(plan.tier_psnr_mean[0]));
  CHECK(std::isfinite(plan.tier_psnr_mean[1]));
}

TEST_CASE("plan validation catches bad settings") {
  Rng rng(1);
  auto corpus = synth_digits(1000, rng);
  PlanConfig cfg;
  cfg.n_clients = 2;
  CHECK_THROWS_AS(make_plan(corpus, cfg, 1), std::invalid_argument);
  cfg = PlanConfig{};
  cfg.n_clients = 20;  // needs 4800 examples at size_min 240
  CHECK_THROWS_AS(make_plan(corpus, cfg, 1), std::invalid_argument);
  cfg = PlanConfig{};
  cfg.n_clients = 4;
  cfg.fractions = {0.5, 0.4, 0.3};
  CHECK_THROWS_AS(make_plan(corpus, cfg, 1), std::invalid_argument);
  cfg = PlanConfig{};
  cfg.n_clients = 4;
  cfg.primary_share = 0.2;
  CHECK_THROWS_AS(make_plan(corpus, cfg, 1), std::invalid_argument);
}
