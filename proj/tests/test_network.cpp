#include <algorithm>
#include <cmath>
#include <numeric>

#include "asap/experiments.hpp"
#include "asap/loss.hpp"
#include "asap/network.hpp"
#include "asap/trainer.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace asap;
using testing::random_tensor;

namespace {

NetworkConfig small_config(AttentionMode attention = AttentionMode::vertical) {
  NetworkConfig cfg;
  cfg.backbone.stage_channels = {8, 16, 16, 32};
  cfg.backbone.blocks_per_stage = 1;
  cfg.width = 16;
  cfg.attention = attention;
  return cfg;
}

void randomize(const Tensor& t, std::mt19937_64& rng, double scale = 0.3) {
  Tensor h = t;
  for (auto& v : h.mutable_data()) v = real(scale * testing::uniform(1, rng)[0]);
}

Tensor permute_rows(const Tensor& f, const std::vector<std::size_t>& perm) {
  const auto& s = f.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  std::vector<real> out(f.numel());
  for (std::size_t b = 0; b < n * c; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(b * h + y) * w + x] = f.data()[(b * h + perm[y]) * w + x];
  return Tensor::from(s, out);
}

bool any_nonzero(std::span<const real> v) {
  return std::any_of(v.begin(), v.end(), [](real x) { return x != 0; });
}

}  // namespace

TEST_SUITE("network") {

TEST_CASE("backbone stage shapes for a 64x64 input") {
  ParamStore store(1);
  BackboneConfig cfg;
  Backbone bb(store, cfg);
  std::mt19937_64 rng(1);
  const auto stages = bb.forward(random_tensor(Shape{2, 3, 64, 64}, rng), true);
  const std::size_t sizes[] = {16, 8, 4, 2};
  for (std::size_t s = 0; s < 4; ++s)
    CHECK(stages[s].shape() == Shape({2, cfg.stage_channels[s], sizes[s], sizes[s]}));
  CHECK_THROWS_AS(bb.forward(Tensor::zeros(Shape{1, 3, 48, 64}), true), ShapeError);
}

TEST_CASE("backbone parameter count") {
  BackboneConfig cfg;  // 16/32/64/128, two blocks per stage
  // stem 464; stage1 2336 + 4672; stage2 4672 + 18560; stage3 18560 + 73984;
  // stage4 73984 + 295424
  CHECK(backbone_param_count(cfg) == 492656);

  for (const BackboneConfig c : {cfg, BackboneConfig{{8, 16, 32, 64}, 1}, BackboneConfig{{4, 4, 8, 8}, 3}}) {
    ParamStore store(1);
    Backbone bb(store, c);
    CHECK(store.trainable_count() == backbone_param_count(c));
  }
}

TEST_CASE("all-zero input gives all-zero backbone features") {
  ParamStore store(2);
  Backbone bb(store, BackboneConfig{});
  const auto stages = bb.forward(Tensor::zeros(Shape{1, 3, 64, 64}), true);
  for (const auto& s : stages) CHECK_FALSE(any_nonzero(s.data()));
}

TEST_CASE("star fpn contracts") {
  ParamStore store(3);
  const std::array<std::size_t, 4> ch{16, 16, 24, 32};
  StarFpn fpn(store, ch, 16);
  std::mt19937_64 rng(3);
  std::array<Tensor, 4> stages;
  for (std::size_t i = 0; i < 4; ++i) stages[i] = random_tensor(Shape{2, ch[i], 16u >> i, 32u >> i}, rng);

  const FeaturePyramid pyr = fpn.forward(stages, true);
  for (std::size_t i = 1; i <= 3; ++i) {
    CHECK(pyr.p(i).shape()[2] == 2 * pyr.p(i + 1).shape()[2]);
    CHECK(pyr.p(i).shape()[3] == 2 * pyr.p(i + 1).shape()[3]);
  }
  CHECK(pyr.p(1).shape() == Shape({2, 16, 16, 32}));

  auto mismatched = stages;
  mismatched[2] = random_tensor(Shape{2, 24, 3, 8}, rng);
  CHECK_THROWS_AS(fpn.forward(mismatched, true), ShapeError);

  SUBCASE("zero laterals give a zero pyramid") {
    for (auto& l : fpn.laterals()) {
      for (auto& v : l.weight.mutable_data()) v = 0;
      for (auto& v : l.bias.mutable_data()) v = 0;
    }
    for (const auto& m : fpn.merge(stages)) CHECK_FALSE(any_nonzero(m.data()));
    const FeaturePyramid z = fpn.forward(stages, true);
    for (const auto& p : z.levels) CHECK_FALSE(any_nonzero(p.data()));
  }

  SUBCASE("without top-down input a level is its own lateral projection") {
    auto& lat = fpn.laterals();
    for (std::size_t i = 1; i < 4; ++i) {
      for (auto& v : lat[i].weight.mutable_data()) v = 0;
      for (auto& v : lat[i].bias.mutable_data()) v = 0;
    }
    // identity lateral on P1 (16 -> 16 channels)
    for (auto& v : lat[0].weight.mutable_data()) v = 0;
    for (std::size_t c = 0; c < 16; ++c) lat[0].weight.mutable_data()[c * 16 + c] = 1;
    for (auto& v : lat[0].bias.mutable_data()) v = 0;
    const auto merged = fpn.merge(stages);
    CHECK(testing::max_abs_diff(merged[0].data(), stages[0].data()) == 0);
  }
}

TEST_CASE("ffdn contracts") {
  ParamStore store(4);
  Ffdn ffdn(store, 8, FusionMode::ffdn);
  std::mt19937_64 rng(4);
  FeaturePyramid pyr;
  for (std::size_t i = 0; i < 4; ++i) pyr.levels[i] = random_tensor(Shape{2, 8, 16u >> i, 16u >> i}, rng);

  const Tensor f = ffdn.forward(pyr);
  CHECK(f.shape() == pyr.p(1).shape());

  SUBCASE("zero pyramid gives the sum of the betas") {
    for (auto& b : ffdn.ln().beta.mutable_data()) b = real(testing::uniform(1, rng)[0]);
    for (auto& b : ffdn.in().beta.mutable_data()) b = real(testing::uniform(1, rng)[0]);
    for (auto& p : ffdn.projections())
      for (auto& v : p.bias.mutable_data()) v = 0;
    FeaturePyramid zero;
    for (std::size_t i = 0; i < 4; ++i) zero.levels[i] = Tensor::zeros(pyr.levels[i].shape());
    const Tensor z = ffdn.forward(zero);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t i = 0; i < 256; ++i)
          CHECK(z.data()[(n * 8 + c) * 256 + i] == ffdn.ln().beta.data()[c] + ffdn.in().beta.data()[c]);
  }

  SUBCASE("branch statistics") {
    const Tensor s = ffdn.fuse(pyr);
    const Tensor ln = layer_norm(s, ffdn.ln());
    const Tensor in = instance_norm(s, ffdn.in());
    for (std::size_t n = 0; n < 2; ++n) {
      double m = 0;
      for (std::size_t i = 0; i < 8 * 256; ++i) m += ln.data()[n * 8 * 256 + i];
      CHECK(std::abs(m / (8 * 256)) < 1e-6);
    }
    for (std::size_t g = 0; g < 16; ++g) {
      double m = 0;
      for (std::size_t i = 0; i < 256; ++i) m += in.data()[g * 256 + i];
      CHECK(std::abs(m / 256) < 1e-6);
    }
  }

  SUBCASE("every pyramid level influences the output") {
    for (auto& p : ffdn.projections())
      for (auto& v : p.bias.mutable_data()) v = real(testing::uniform(1, rng)[0]);
    for (std::size_t i = 0; i < 4; ++i) {
      FeaturePyramid noisy = pyr;
      noisy.levels[i] = add(pyr.levels[i], scale(random_tensor(pyr.levels[i].shape(), rng), 0.1));
      CHECK(testing::max_abs_diff(ffdn.forward(noisy).data(), f.data()) > 1e-6);
    }
  }
}

TEST_CASE("ln_only and in_only differ only in the active branch") {
  ParamStore a(5), b(5), c(5);
  Ffdn ln(a, 8, FusionMode::ln_only), in(b, 8, FusionMode::in_only), both(c, 8, FusionMode::ffdn);
  std::mt19937_64 rng(5);
  FeaturePyramid pyr;
  for (std::size_t i = 0; i < 4; ++i) pyr.levels[i] = random_tensor(Shape{1, 8, 16u >> i, 16u >> i}, rng);
  const Tensor s = both.fuse(pyr);
  CHECK(testing::max_abs_diff(ln.forward(pyr).data(), layer_norm(s, both.ln()).data()) == 0);
  CHECK(testing::max_abs_diff(in.forward(pyr).data(), instance_norm(s, both.in()).data()) == 0);
  CHECK(testing::max_abs_diff(both.forward(pyr).data(),
                              add(layer_norm(s, both.ln()), instance_norm(s, both.in())).data()) == 0);
}

TEST_CASE("attention with zero parameters is the exact identity") {
  ParamStore store(6);
  DirectionalAttention attn(store, AttentionConfig{16, 0}, AttentionMode::vertical);
  std::mt19937_64 rng(6);
  const Tensor f = random_tensor(Shape{2, 16, 5, 7}, rng);
  // freshly built: only the value projection is zero
  CHECK(testing::max_abs_diff(attn.forward(f).data(), f.data()) == 0);
  for (ConvParams* p : {&attn.query(), &attn.key(), &attn.value()}) {
    for (auto& v : p->weight.mutable_data()) v = 0;
    if (p->bias.defined())
      for (auto& v : p->bias.mutable_data()) v = 0;
  }
  CHECK(testing::max_abs_diff(attn.forward(f).data(), f.data()) == 0);
}

TEST_CASE("attention map shape and row sums") {
  ParamStore store(7);
  DirectionalAttention attn(store, AttentionConfig{16, 4}, AttentionMode::vertical);
  std::mt19937_64 rng(7);
  for (ConvParams* p : {&attn.query(), &attn.key(), &attn.value()}) {
    randomize(p->weight, rng, 2.0);
    if (p->bias.defined()) randomize(p->bias, rng);
  }
  double worst = 0;
  for (int t = 0; t < 20; ++t) {
    Tensor a;
    attn.forward(random_tensor(Shape{2, 16, 4, 9}, rng, false, -3, 3), &a);
    REQUIRE(a.shape() == Shape({2, 9, 9}));
    for (std::size_t r = 0; r < 18; ++r) {
      double s = 0;
      for (std::size_t i = 0; i < 9; ++i) s += a.data()[r * 9 + i];
      worst = std::max(worst, std::abs(s - 1));
    }
  }
  CHECK(worst < 1e-9);

  Tensor single;
  attn.forward(random_tensor(Shape{1, 16, 4, 1}, rng), &single);
  CHECK(single.shape() == Shape({1, 1, 1}));
  CHECK(single.item() == 1);
}

TEST_CASE("attention branch ignores row order") {
  ParamStore store(8);
  DirectionalAttention attn(store, AttentionConfig{8, 0}, AttentionMode::vertical);
  std::mt19937_64 rng(8);
  for (ConvParams* p : {&attn.query(), &attn.key(), &attn.value()}) {
    randomize(p->weight, rng, 1.0);
    if (p->bias.defined()) randomize(p->bias, rng);
  }
  double worst = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t h = 2 + t % 6;
    const Tensor f = random_tensor(Shape{2, 8, h, 6}, rng);
    std::vector<std::size_t> perm(h);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor pf = permute_rows(f, perm);
    const Tensor lhs = sub(attn.forward(pf), pf);
    const Tensor rhs = permute_rows(sub(attn.forward(f), f), perm);
    worst = std::max(worst, testing::max_abs_diff(lhs.data(), rhs.data()));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("horizontal attention is vertical attention on the transposed map") {
  ParamStore a(9), b(9);
  DirectionalAttention v(a, AttentionConfig{8, 0}, AttentionMode::vertical);
  DirectionalAttention h(b, AttentionConfig{8, 0}, AttentionMode::horizontal);
  std::mt19937_64 r1(9), r2(9);
  for (ConvParams* p : {&v.query(), &v.key(), &v.value()}) randomize(p->weight, r1, 1.0);
  for (ConvParams* p : {&h.query(), &h.key(), &h.value()}) randomize(p->weight, r2, 1.0);
  std::mt19937_64 rng(10);
  const Tensor f = random_tensor(Shape{1, 8, 4, 6}, rng);
  CHECK(testing::max_abs_diff(h.forward(f).data(), transpose_hw(v.forward(transpose_hw(f))).data()) == 0);
}

TEST_CASE("attention layer passes the finite difference check") {
  ParamStore store(11);
  DirectionalAttention attn(store, AttentionConfig{8, 2}, AttentionMode::vertical);
  std::mt19937_64 rng(11);
  for (ConvParams* p : {&attn.query(), &attn.key(), &attn.value()}) {
    randomize(p->weight, rng, 1.0);
    if (p->bias.defined()) randomize(p->bias, rng);
  }
  Tensor f = random_tensor(Shape{2, 8, 3, 5}, rng, true);
  auto run = [&](Tensor leaf) {
    const auto r = finite_diff_check_leaf([&] { return testing::probe(attn.forward(f)); }, leaf);
    CHECK(r.passed);
  };
  run(f);
  run(attn.query().weight);
  run(attn.query().bias);
  run(attn.key().weight);
  run(attn.value().weight);
  run(attn.value().bias);
}

TEST_CASE("seg head contracts") {
  ParamStore store(12);
  SegHead head(store, "head", 8, 5);
  std::mt19937_64 rng(12);
  const Tensor x = random_tensor(Shape{2, 8, 4, 8}, rng);
  const Tensor y = head.forward(x, 16, 32, true);
  CHECK(y.shape() == Shape({2, 5, 16, 32}));

  const LabelMap a = predict(y);
  const LabelMap b = predict(add_scalar(y, 12.5));
  CHECK(a == b);

  for (auto& v : head.classifier().weight.mutable_data()) v = 0;
  const Tensor z = head.forward(x, 16, 32, true);
  const Tensor probs = softmax_lastdim(transpose_last2(reshape(z, Shape{2, 5, 16 * 32})));
  for (real p : probs.data()) CHECK(p == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("model output shapes and determinism") {
  AsapNet model(small_config());
  std::mt19937_64 rng(13);
  const Tensor image = random_tensor(Shape{2, 3, 64, 32}, rng, false, 0, 1);
  const ModelOutput train = model.forward(image, true);
  CHECK(train.logits.shape() == Shape({2, 5, 64, 32}));
  CHECK(train.aux1.shape() == Shape({2, 5, 64, 32}));
  CHECK(train.aux2.shape() == Shape({2, 5, 64, 32}));

  const ModelOutput e1 = model.forward(image, false);
  const ModelOutput e2 = model.forward(image, false);
  CHECK(e1.logits.shape() == Shape({2, 5, 64, 32}));
  CHECK_FALSE(e1.aux1.defined());
  CHECK(testing::max_abs_diff(e1.logits.data(), e2.logits.data()) == 0);

  AsapNet fresh(small_config());
  CHECK_THROWS_AS(fresh.forward(image, false), StateError);
}

TEST_CASE("auxiliary heads read only their own level") {
  AsapNet model(small_config());
  std::mt19937_64 rng(14);
  const Tensor image = random_tensor(Shape{2, 3, 64, 64}, rng, false, 0, 1);
  const auto stages = model.backbone().forward(image, true);
  FeaturePyramid pyr = model.neck().forward(stages, true);
  const Tensor aux1 = model.aux_head(1).forward(pyr.p(3), 64, 64, true);
  pyr.levels[3] = Tensor::zeros(pyr.levels[3].shape());
  const Tensor again = model.aux_head(1).forward(pyr.p(3), 64, 64, true);
  CHECK(testing::max_abs_diff(aux1.data(), again.data()) == 0);
}

TEST_CASE("aux1 loss reaches backbone stages 1 to 3") {
  AsapNet model(small_config());
  std::mt19937_64 rng(15);
  const Tensor image = random_tensor(Shape{2, 3, 64, 64}, rng, false, 0, 1);
  LabelMap labels(2, 64, 64);
  for (auto& l : labels.data) l = std::int32_t(rng() % 5);
  const ModelOutput out = model.forward(image, true);
  ohem_ce(out.aux1, labels, LossWeights{}).backward();
  for (const char* name : {"backbone.stage1.down.conv.weight", "backbone.stage2.down.conv.weight",
                           "backbone.stage3.down.conv.weight", "aux1.classifier.weight"}) {
    INFO(name);
    CHECK(any_nonzero(model.params().find(name).tensor.grad()));
  }
  const Tensor& head = model.params().find("head.classifier.weight").tensor;
  CHECK((!head.has_grad() || !any_nonzero(head.grad())));
}

TEST_CASE("every trainable parameter receives gradient") {
  for (auto mode : {AttentionMode::vertical, AttentionMode::horizontal}) {
    AsapNet model(small_config(mode));
    std::mt19937_64 rng(16);
    TrainConfig tc;
    OptimizerState opt;
    // The first step moves the zero value projection; after that the query
    // and key projections are reachable too.
    for (int step = 0; step < 2; ++step) {
      model.params().zero_grad();
      const Tensor image = random_tensor(Shape{2, 3, 64, 64}, rng, false, 0, 1);
      LabelMap labels(2, 64, 64);
      for (auto& l : labels.data) l = std::int32_t(rng() % 5);
      const ModelOutput out = model.forward(image, true);
      total_loss(out.logits, out.aux1, out.aux2, labels, tc.loss).total.backward();
      if (step == 0) sgd_step(model.params(), opt, real(0.01), tc);
    }
    std::size_t dead = 0;
    for (const auto& e : model.params().entries()) {
      if (e.kind == ParamKind::buffer) continue;
      if (!e.tensor.has_grad() || !any_nonzero(e.tensor.grad())) {
        ++dead;
        MESSAGE("no gradient: " << e.name);
      }
    }
    CHECK(dead == 0);
  }
}

TEST_CASE("ablation variants share parameters outside the attention block") {
  const NetworkConfig base = small_config();
  AsapNet full(apply_variant(base, "full")), none(apply_variant(base, "no_attention"));
  std::vector<std::string> a, b;
  std::size_t attention_params = 0;
  for (const auto& e : full.params().entries()) {
    if (e.name.rfind("attention.", 0) == 0) {
      attention_params += e.tensor.numel();
      continue;
    }
    a.push_back(e.name + " " + e.tensor.shape().str());
  }
  for (const auto& e : none.params().entries()) b.push_back(e.name + " " + e.tensor.shape().str());
  CHECK(a == b);
  // C = 16, C-hat = 2: query 16*2+2, key 16*2, value 16*16+16
  CHECK(attention_params == 34 + 32 + 272);
  CHECK(full.params().trainable_count() == none.params().trainable_count() + attention_params);
  CHECK_THROWS_AS(apply_variant(base, "bogus"), ContractError);
}

TEST_CASE("whole model passes the finite difference check on the mean logit") {
  ModelGradCheckOptions opts;
  opts.objective = GradObjective::mean_logit;
  const auto r = model_gradcheck(small_config(), opts);
  INFO("worst " << r.worst << " " << r.max_rel_error);
  CHECK(r.passed);
  CHECK(r.checked > 100);
}

}  // TEST_SUITE
