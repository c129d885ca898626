#include "qahfl/models.hpp"

#include <stdexcept>

namespace qahfl {
namespace {

LayerDesc conv(const std::string& name, int filters, int kernel) {
  LayerDesc l;
  l.kind = LayerKind::Conv2d;
  l.name = name;
  l.out_ch = filters;
  l.kernel = kernel;
  return l;
}

LayerDesc dense(const std::string& name, int width) {
  LayerDesc l;
  l.kind = LayerKind::Dense;
  l.name = name;
  l.out_ch = width;
  return l;
}

LayerDesc simple(LayerKind kind, const std::string& name) {
  LayerDesc l;
  l.kind = kind;
  l.name = name;
  return l;
}

LayerDesc bn(const std::string& name) { return simple(LayerKind::BatchNorm, name); }

LayerDesc dropout(const std::string& name, double rate) {
  LayerDesc l = simple(LayerKind::Dropout, name);
  l.rate = rate;
  return l;
}

LayerDesc se(const std::string& name, int hidden) {
  LayerDesc l = simple(LayerKind::SqueezeExcite, name);
  l.hidden = hidden;
  return l;
}

LayerDesc skip(LayerKind kind, const std::string& name, int slot) {
  LayerDesc l = simple(kind, name);
  l.slot = slot;
  return l;
}

// Adds conv-bn-relu-conv-bn with an identity shortcut around it, then a
// post-join relu. Channel count must already equal `ch`.
void residual_block(std::vector<LayerDesc>& v, const std::string& stem, int ch, int kernel,
                    int slot) {
  v.push_back(skip(LayerKind::SkipSave, stem + ".save", slot));
  v.push_back(conv(stem + ".conv1", ch, kernel));
  v.push_back(bn(stem + ".bn1"));
  v.push_back(simple(LayerKind::Relu, stem + ".relu1"));
  v.push_back(conv(stem + ".conv2", ch, kernel));
  v.push_back(bn(stem + ".bn2"));
  v.push_back(skip(LayerKind::SkipAdd, stem + ".add", slot));
  v.push_back(simple(LayerKind::Relu, stem + ".relu2"));
}

}  // namespace

ModelSpec make_tier_spec(QualityTier tier) {
  ModelSpec spec;
  spec.tier = tier;
  spec.feature_dim = tier_feature_dim(tier);
  TierTraining tt = tier_training(tier);
  std::vector<LayerDesc>& v = spec.layers;

  switch (tier) {
    case QualityTier::Low:
      // Two plain conv stages; the heavy inputs are already half resolution
      // after one pool, which keeps this runnable on the weakest devices.
      v.push_back(conv("conv1", 8, 5));
      v.push_back(simple(LayerKind::Relu, "relu1"));
      v.push_back(simple(LayerKind::MaxPool2x2, "pool1"));
      v.push_back(conv("conv2", 16, 5));
      v.push_back(simple(LayerKind::Relu, "relu2"));
      v.push_back(simple(LayerKind::GlobalAvgPool, "gap"));
      v.push_back(simple(LayerKind::FeatureTap, "features"));
      v.push_back(dense("fc1", 16));
      v.push_back(simple(LayerKind::Relu, "relu3"));
      v.push_back(dropout("drop", tt.dropout));
      v.push_back(dense("fc2", 10));
      break;

    case QualityTier::Medium:
      // Stem and transition at full/half resolution, then the wide 5x5 work
      // happens at 7x7 and 4x4 where it is cheap.
      v.push_back(conv("stem.conv", 16, 3));
      v.push_back(bn("stem.bn"));
      v.push_back(simple(LayerKind::Relu, "stem.relu"));
      v.push_back(simple(LayerKind::MaxPool2x2, "pool1"));
      v.push_back(conv("trans.conv", 32, 3));
      v.push_back(bn("trans.bn"));
      v.push_back(simple(LayerKind::Relu, "trans.relu"));
      v.push_back(simple(LayerKind::MaxPool2x2, "pool2"));
      v.push_back(conv("mid.conv", 32, 5));
      v.push_back(bn("mid.bn"));
      v.push_back(simple(LayerKind::Relu, "mid.relu"));
      v.push_back(simple(LayerKind::MaxPool2x2, "pool3"));
      residual_block(v, "res", 32, 5, 1);
      v.push_back(conv("post.conv", 32, 5));
      v.push_back(bn("post.bn"));
      v.push_back(simple(LayerKind::Relu, "post.relu"));
      v.push_back(simple(LayerKind::GlobalAvgPool, "gap"));
      v.push_back(simple(LayerKind::FeatureTap, "features"));
      v.push_back(dense("fc1", 32));
      v.push_back(simple(LayerKind::Relu, "fc1.relu"));
      v.push_back(dropout("drop", tt.dropout));
      v.push_back(dense("fc2", 10));
      break;

    case QualityTier::High:
      // Aggressive early downsampling (two pools straight after the stem)
      // so both wide residual blocks run on small grids; squeeze-excite
      // gates after each block.
      v.push_back(conv("stem.conv", 32, 3));
      v.push_back(bn("stem.bn"));
      v.push_back(simple(LayerKind::Relu, "stem.relu"));
      v.push_back(simple(LayerKind::MaxPool2x2, "pool1"));
      v.push_back(simple(LayerKind::MaxPool2x2, "pool2"));
      v.push_back(conv("trans.conv", 64, 5));
      v.push_back(bn("trans.bn"));
      v.push_back(simple(LayerKind::Relu, "trans.relu"));
      v.push_back(simple(LayerKind::MaxPool2x2, "pool3"));
      residual_block(v, "res1", 64, 5, 1);
      v.push_back(se("se1", 16));
      residual_block(v, "res2", 64, 3, 2);
      v.push_back(se("se2", 16));
      v.push_back(simple(LayerKind::GlobalAvgPool, "gap"));
      v.push_back(simple(LayerKind::FeatureTap, "features"));
      v.push_back(dense("fc1", 64));
      v.push_back(simple(LayerKind::Relu, "fc1.relu"));
      v.push_back(dropout("drop", tt.dropout));
      v.push_back(dense("fc2", 10));
      break;
  }
  // Fail fast if an edit above breaks the layer graph.
  plan_layout(spec);
  return spec;
}

TierTraining tier_training(QualityTier tier) {
  switch (tier) {
    case QualityTier::Low: return {0.01, 0.01, 0.3};
    case QualityTier::Medium: return {0.005, 0.005, 0.25};
    case QualityTier::High: return {0.003, 0.001, 0.2};
  }
  throw std::logic_error("tier_training: bad tier");
}

int tier_feature_dim(QualityTier tier) {
  switch (tier) {
    case QualityTier::Low: return 16;
    case QualityTier::Medium: return 32;
    case QualityTier::High: return 64;
  }
  throw std::logic_error("tier_feature_dim: bad tier");
}

ModelSpec make_dense_probe(int in_dim, int hidden, int n_classes) {
  ModelSpec spec;
  spec.input_h = 1;
  spec.input_w = 1;
  spec.input_ch = in_dim;
  spec.n_classes = n_classes;
  spec.feature_dim = hidden;
  spec.layers.push_back(dense("fc1", hidden));
  spec.layers.push_back(simple(LayerKind::Relu, "relu"));
  spec.layers.push_back(simple(LayerKind::FeatureTap, "features"));
  spec.layers.push_back(dense("fc2", n_classes));
  return spec;
}

}  // namespace qahfl
