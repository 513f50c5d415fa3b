#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "uvflow/error.hpp"
#include "uvflow/flowdit.hpp"
#include "uvflow/io.hpp"

using namespace uvflow;

namespace {

dit::ModelConfig tiny() {
  dit::ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.token_dim = 16;
  c.heads = 2;
  c.n_double = 1;
  c.n_single = 2;
  c.group_boundaries = {1, 2};
  c.time_dim = 8;
  c.cond_tokens = 16;
  c.mlp_ratio = 2;
  return c;
}

template <typename T>
BasicTensor<T> noise(std::vector<int> shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  BasicTensor<T> t(std::move(shape));
  for (T& v : t.storage()) v = static_cast<T>(u(rng));
  return t;
}

struct Inputs {
  TensorF x, c;
  std::vector<double> t;
};

Inputs inputs(const dit::ModelConfig& cfg, int batch, std::uint64_t seed) {
  const int n = cfg.tokens() * batch;
  Inputs in{noise<float>({n, cfg.patch_dim()}, seed), noise<float>({n, cfg.patch_dim()}, seed + 1), {}};
  for (int b = 0; b < batch; ++b) in.t.push_back(0.1 + 0.8 * b / std::max(1, batch - 1));
  return in;
}

std::vector<int> all_layers(const dit::ModelConfig& c) {
  std::vector<int> l;
  for (int i = 0; i < c.num_layers(); ++i) l.push_back(i);
  return l;
}

std::filesystem::path tmp(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / "uvflow_dit_test";
  std::filesystem::create_directories(d);
  return d / name;
}

}  // namespace

TEST(Patchify, TokenCountAndRasterOrder) {
  auto img = noise<double>({2, 64, 64, 3}, 1);
  auto tok = dit::patchify(img, 4);
  ASSERT_EQ(tok.dim(0), 2 * 256);
  ASSERT_EQ(tok.dim(1), 48);
  // token 37 of sample 1 covers block column 37 % 16 = 5, row 37 / 16 = 2
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c)
        EXPECT_EQ(tok.at(256 + 37, (y * 4 + x) * 3 + c), img[((static_cast<std::size_t>(64) + 2 * 4 + y) * 64 + 5 * 4 + x) * 3 + c]);
  EXPECT_EQ(dit::unpatchify(tok, 2, 64, 4), img);
  EXPECT_THROW(dit::patchify(noise<double>({1, 30, 30, 3}, 1), 4), ValidationError);
  EXPECT_THROW(dit::unpatchify(tok, 3, 64, 4), ValidationError);
}

TEST(Patchify, DifferentiableUnpatchifyMatches) {
  auto tok = noise<double>({2 * 16, 48}, 2);
  ad::Tape tape;
  auto v = tape.input(tok);
  auto img = dit::unpatchify(v, 2, 16, 4);
  EXPECT_EQ(img.value(), dit::unpatchify(tok, 2, 16, 4));
  // d/dtok sum(w * unpatchify(tok)) = patchify(w)
  auto w = noise<double>({2, 16, 16, 3}, 3);
  tape.backward(ad::sum(ad::mul(img, tape.constant(w))));
  EXPECT_EQ(v.grad(), dit::patchify(w, 4));
}

TEST(ModelConfig, JsonStrictness) {
  auto c = dit::config_from_json(dit::config_to_json(dit::ModelConfig{}));
  EXPECT_EQ(c, dit::ModelConfig{});
  EXPECT_THROW(dit::config_from_json(R"({"token_dim": 64, "depth": 3})"), ValidationError);
  EXPECT_THROW(dit::config_from_json(R"({"token_dim": 66, "heads": 4})"), ValidationError);
  EXPECT_THROW(dit::config_from_json(R"({"group_boundaries": [5, 3]})"), ValidationError);
  EXPECT_THROW(dit::config_from_json(R"({"group_boundaries": [4, 12]})"), ValidationError);
  EXPECT_THROW(dit::config_from_json(R"({"image_size": 64, "patch_size": 5})"), ValidationError);
  EXPECT_THROW(dit::config_from_json("[1, 2]"), ValidationError);
  auto d = dit::config_from_json(R"({"patch_size": 8, "group_boundaries": [4, 4]})");
  EXPECT_EQ(d.cond_tokens, 64);
  EXPECT_EQ(d.group_end(1), d.group_end(2));
  EXPECT_THROW(d.group_end(4), ValidationError);
}

TEST(FlowDiT, GoldenParameterCount) {
  dit::ModelConfig c;
  const std::size_t D = 128, P = 48, N = 256, H = 512, T = 64;
  const std::size_t stream = (D * 3 * D + 3 * D) + (D * D + D) + (D * H + H) + (H * D + D);
  const std::size_t expect = 2 * (P * D + D) + 2 * N * D + (T * D + D) + (D * D + D) + (4 * 2 + 8) * stream + (D * P + P);
  dit::FlowDiT<float> m(c);
  EXPECT_EQ(m.parameter_count(), expect);
  EXPECT_EQ(m.parameter_count(), 3273264u);
}

TEST(FlowDiT, IdentityScalingAndSelfReplacementAreExact) {
  auto cfg = tiny();
  dit::FlowDiT<float> m(cfg, 7);
  auto in = inputs(cfg, 3, 11);
  auto plain = m.forward(in.x, in.t, in.c);
  EXPECT_EQ(m.forward(in.x, in.t, in.c, dit::InjectionSpec<float>::scale(all_layers(cfg), 1.0)), plain);
  EXPECT_EQ(m.forward(in.x, in.t, in.c, dit::InjectionSpec<float>::scale(all_layers(cfg), 1.0, true)), plain);

  auto [v, cache] = m.record_features(in.x, in.t, in.c);
  EXPECT_EQ(v, plain);
  ASSERT_EQ(cache.layers.size(), 3u);
  for (int l = 0; l < 3; ++l) {
    ASSERT_TRUE(cache.layers.count(l));
    EXPECT_EQ(cache.layers.at(l).shape(), (std::vector<int>{3 * 2 * cfg.tokens(), cfg.token_dim}));
  }
  EXPECT_EQ(m.forward(in.x, in.t, in.c, dit::InjectionSpec<float>::replace(cache, all_layers(cfg))), plain);
  EXPECT_EQ(m.forward(in.x, in.t, in.c, dit::InjectionSpec<float>::replace(cache, {0, 2})), plain);
  EXPECT_EQ(m.forward(in.x, in.t, in.c), plain);  // pure
}

TEST(FlowDiT, ScalingMultipliesTheAttentionOutput) {
  auto cfg = tiny();
  dit::FlowDiT<double> m(cfg, 3);
  auto in = inputs(cfg, 2, 5);
  auto xd = in.x.cast<double>(), cd = in.c.cast<double>();
  for (int layer : {0, 1}) {
    ad::Tape plain_tape(false), scaled_tape(false);
    dit::FeatureCache<double> plain, scaled;
    m.forward_tokens(plain_tape, m.constants(plain_tape), xd, in.t, cd, nullptr, &plain);
    auto spec = dit::InjectionSpec<double>::scale({layer}, 0.25);
    m.forward_tokens(scaled_tape, m.constants(scaled_tape), xd, in.t, cd, &spec, &scaled);
    const auto& a = plain.layers.at(layer);
    const auto& b = scaled.layers.at(layer);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(b[i], 0.25 * a[i]);
  }
}

TEST(FlowDiT, MaskedDirectivesTouchOnlySelectedTokens) {
  auto cfg = tiny();
  dit::FlowDiT<float> m(cfg, 3);
  auto in = inputs(cfg, 2, 5);
  ad::TapeF tape(false);
  dit::FeatureCache<float> rec;
  dit::InjectionSpec<float> spec;
  dit::LayerInjection<float> li;
  li.kind = dit::Directive::scale;
  li.eps = 0.0;
  li.token_mask.assign(2 * cfg.tokens(), 0);
  li.token_mask[3] = 1;
  spec.layers[1] = li;
  dit::FeatureCache<float> plain;
  ad::TapeF t2(false);
  m.forward_tokens(t2, m.constants(t2), in.x, in.t, in.c, nullptr, &plain);
  m.forward_tokens(tape, m.constants(tape), in.x, in.t, in.c, &spec, &rec);
  const auto& a = rec.layers.at(1);
  const auto& p = plain.layers.at(1);
  for (int r = 0; r < a.dim(0); ++r)
    for (int k = 0; k < a.dim(1); ++k) {
      if (r % (2 * cfg.tokens()) == 3) EXPECT_EQ(a.at(r, k), 0.0f);
      else EXPECT_EQ(a.at(r, k), p.at(r, k));
    }
  li.token_mask.pop_back();
  spec.layers[1] = li;
  EXPECT_THROW(m.forward(in.x, in.t, in.c, spec), ValidationError);
}

TEST(FlowDiT, LogitScalingIsADistinctVariant) {
  auto cfg = tiny();
  dit::FlowDiT<float> m(cfg, 4);
  auto in = inputs(cfg, 1, 9);
  auto plain = m.forward(in.x, in.t, in.c);
  auto out_scaled = m.forward(in.x, in.t, in.c, dit::InjectionSpec<float>::scale({0}, 0.0));
  auto logit_scaled = m.forward(in.x, in.t, in.c, dit::InjectionSpec<float>::scale({0}, 0.0, true));
  EXPECT_NE(out_scaled, plain);
  EXPECT_NE(logit_scaled, plain);
  EXPECT_NE(logit_scaled, out_scaled);
  EXPECT_THROW(dit::InjectionSpec<float>::scale({0}, -0.5), ValidationError);
}

TEST(FlowDiT, ReplacementShapeMismatchIsRejected) {
  auto cfg = tiny();
  dit::FlowDiT<float> m(cfg, 4);
  auto in1 = inputs(cfg, 1, 9), in2 = inputs(cfg, 2, 9);
  auto [v, cache] = m.record_features(in1.x, in1.t, in1.c);
  EXPECT_THROW(m.forward(in2.x, in2.t, in2.c, dit::InjectionSpec<float>::replace(cache, {1})), ValidationError);
  EXPECT_THROW(dit::InjectionSpec<float>::replace(cache, {7}), ValidationError);
}

TEST(FlowDiT, ZeroWeightsGiveTheOutputBias) {
  auto cfg = tiny();
  dit::FlowDiT<double> m(cfg, 1);
  for (auto& p : m.params()) p.value.fill(0.0);
  auto& b = m.param("head.b").value;
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.1 * static_cast<double>(i) - 1.0;
  auto in = inputs(cfg, 2, 3);
  auto v = m.forward(in.x.cast<double>(), in.t, in.c.cast<double>());
  for (int r = 0; r < v.dim(0); ++r)
    for (int k = 0; k < v.dim(1); ++k) ASSERT_EQ(v.at(r, k), b[static_cast<std::size_t>(k)]);
}

TEST(FlowDiT, NonFiniteActivationsReportTheLayer) {
  auto cfg = tiny();
  dit::FlowDiT<float> m(cfg, 1);
  m.param("single0.mlp2.b").value[0] = std::nanf("");
  auto in = inputs(cfg, 1, 3);
  try {
    m.forward(in.x, in.t, in.c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}

TEST(FlowDiT, TruncationDecodesThroughTheSharedHead) {
  auto cfg = tiny();
  dit::FlowDiT<float> m(cfg, 2);
  auto in = inputs(cfg, 2, 4);
  auto full = dit::unpatchify(m.forward(in.x, in.t, in.c), 2, cfg.image_size, cfg.patch_size);
  EXPECT_EQ(m.forward_truncated(in.x, in.t, in.c, 3), full);
  EXPECT_NE(m.forward_truncated(in.x, in.t, in.c, 1), full);
  EXPECT_THROW(m.forward_truncated(in.x, in.t, in.c, 0), ValidationError);

  auto deg = cfg;
  deg.group_boundaries = {2, 2};
  dit::FlowDiT<float> d(deg, 2);
  EXPECT_EQ(d.forward_truncated(in.x, in.t, in.c, 1), d.forward_truncated(in.x, in.t, in.c, 2));
  EXPECT_NE(d.forward_truncated(in.x, in.t, in.c, 2), d.forward_truncated(in.x, in.t, in.c, 3));
}

TEST(LossRf, StubbedFieldsMatchClosedForms) {
  const int B = 4, S = 8;
  auto x0 = noise<double>({B, S, S, 3}, 21, 0.0, 1.0);
  auto cond = noise<double>({B, S, S, 3}, 22, 0.0, 1.0);

  // a field that returns the exact target
  dit::VelocityFn<double> exact = [&](ad::Tape& tape, const Tensor& x_t, const std::vector<double>& t, const Tensor&) {
    Tensor v(x_t.shape());
    const std::size_t per = v.size() / B;
    for (int b = 0; b < B; ++b)
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
        double x = 2 * x0[i] - 1;
        v[i] = (x_t[i] - (1 - t[static_cast<std::size_t>(b)]) * x) / t[static_cast<std::size_t>(b)] - x;
      }
    return tape.constant(v);
  };
  Rng r1(5);
  ad::Tape t1;
  EXPECT_LT(dit::loss_rf<double>(t1, exact, x0, cond, r1).value()[0], 1e-20);

  dit::VelocityFn<double> zero = [](ad::Tape& tape, const Tensor& x_t, const std::vector<double>&, const Tensor&) {
    return tape.constant(Tensor(x_t.shape()));
  };
  Rng r2(6);
  ad::Tape t2;
  double got = dit::loss_rf<double>(t2, zero, x0, cond, r2).value()[0];
  // oracle: replay the documented draw order (t per sample, then the noise)
  Rng r3(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int b = 0; b < B; ++b) u(r3);
  double sq = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    // one fresh normal per draw, no cached pair
    double e = std::normal_distribution<double>(0.0, 1.0)(r3) - (2 * x0[i] - 1);
    sq += e * e;
  }
  EXPECT_NEAR(got, sq / static_cast<double>(x0.size()), 1e-12);

  Rng r4(6);
  ad::Tape t4;
  EXPECT_EQ(dit::loss_rf<double>(t4, zero, x0, cond, r4).value()[0], got);
}

TEST(LossRf, GradientMatchesFiniteDifferences) {
  dit::ModelConfig c = tiny();
  c.n_double = 1;
  c.n_single = 1;
  c.group_boundaries = {1, 1};
  c.image_size = 8;
  c.cond_tokens = 4;
  dit::FlowDiT<double> m(c, 8);
  for (auto& p : m.params())
    for (double& v : p.value.storage()) v *= 10.0;  // leave the near-linear regime
  auto x0 = noise<double>({2, 8, 8, 3}, 1, 0.0, 1.0), cond = noise<double>({2, 8, 8, 3}, 2, 0.0, 1.0);
  auto loss_at = [&](dit::FlowDiT<double>& model) {
    Rng rng(3);
    ad::Tape tape(false);
    return dit::loss_rf<double>(tape, dit::model_field<double>(model, nullptr), x0, cond, rng).value()[0];
  };
  for (auto& p : m.params()) p.zero_grad();
  {
    Rng rng(3);
    ad::Tape tape;
    auto pv = m.bind(tape);
    tape.backward(dit::loss_rf<double>(tape, dit::model_field(m, &pv), x0, cond, rng));
  }
  std::mt19937_64 pick(4);
  for (const char* name : {"x_embed.w", "x_pos", "t_mlp1.w", "double0.x.qkv.w", "double0.c.out.w", "double0.c.qkv.w",
                           "single0.qkv.w", "single0.mlp1.w", "head.w", "head.b"}) {
    auto& p = m.param(name);
    for (int trial = 0; trial < 2; ++trial) {
      std::size_t i = std::uniform_int_distribution<std::size_t>(0, p.value.size() - 1)(pick);
      const double h = 1e-5, orig = p.value[i];
      p.value[i] = orig + h;
      double up = loss_at(m);
      p.value[i] = orig - h;
      double dn = loss_at(m);
      p.value[i] = orig;
      double fd = (up - dn) / (2 * h), an = p.grad[i];
      EXPECT_LE(std::abs(fd - an), 1e-3 * std::max(std::abs(fd), 1e-6) + 1e-9) << name << "[" << i << "] fd " << fd << " analytic " << an;
    }
  }
}

namespace {

dit::TrainData tiny_data(int n, int size) {
  dit::TrainData d;
  for (int i = 0; i < n; ++i) {
    d.x0.push_back(noise<double>({size, size, 3}, 100 + i, 0.0, 1.0));
    d.cond.push_back(noise<double>({size, size, 3}, 200 + i, 0.0, 1.0));
    d.t_skin.push_back(noise<double>({size, size, 3}, 300 + i, 0.0, 1.0));
    d.t_skin_mouth.push_back(noise<double>({size, size, 3}, 400 + i, 0.0, 1.0));
  }
  return d;
}

}  // namespace

TEST(Training, BranchOrderAndNoOpProbability) {
  auto cfg = tiny();
  auto data = tiny_data(6, cfg.image_size);
  dit::TrainConfig tc;
  tc.steps = 6;
  tc.batch = 4;
  tc.seed = 9;
  dit::FlowDiT<float> a(cfg, 1), b(cfg, 1), c(cfg, 1);
  auto ra = dit::train(a, data, tc);
  tc.disentangle = true;
  tc.p = 0.0;
  auto rb = dit::train(b, data, tc);
  EXPECT_EQ(ra.losses, rb.losses);
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
  tc.p = 1.0;
  auto rc = dit::train(c, data, tc);
  for (int br : rc.branches) EXPECT_EQ(br, 1);

  Rng rng(1);
  int counts[4] = {0, 0, 0, 0};
  for (int i = 0; i < 20000; ++i) ++counts[dit::truncation_branch(rng, 0.3)];
  EXPECT_NEAR(counts[1] / 20000.0, 0.3, 0.015);
  EXPECT_NEAR(counts[2] / 20000.0, 0.7 * 0.3, 0.015);
}

TEST(Training, DeterministicAndDecreasing) {
  auto cfg = tiny();
  auto data = tiny_data(4, cfg.image_size);
  dit::TrainConfig tc;
  tc.steps = 60;
  tc.batch = 4;
  tc.lr = 3e-3;
  dit::FlowDiT<float> a(cfg, 1), b(cfg, 1);
  auto ra = dit::train(a, data, tc);
  auto rb = dit::train(b, data, tc);
  EXPECT_EQ(ra.losses, rb.losses);
  EXPECT_EQ(ra.rng_state, rb.rng_state);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += ra.losses[static_cast<std::size_t>(i)];
    last += ra.losses[ra.losses.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(last, first);
  dit::TrainData bad = data;
  bad.t_skin.clear();
  tc.disentangle = true;
  EXPECT_THROW(dit::train(a, bad, tc), ValidationError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  auto cfg = tiny();
  dit::FlowDiT<float> m(cfg, 5);
  dit::CheckpointMeta meta;
  meta.step = 12;
  meta.rng_state = "1 2 3";
  meta.disentangled = true;
  meta.extra = R"({"note": "x"})";
  auto p1 = tmp("a.uvdit"), p2 = tmp("b.uvdit");
  dit::save_model(p1, m, meta);
  dit::CheckpointMeta back;
  auto loaded = dit::load_model<float>(p1, &back);
  EXPECT_EQ(back.step, 12);
  EXPECT_TRUE(back.disentangled);
  EXPECT_EQ(back.rng_state, "1 2 3");
  EXPECT_EQ(loaded.config(), cfg);
  dit::save_model(p2, loaded, back);
  EXPECT_EQ(io::read_bytes(p1), io::read_bytes(p2));
  auto in = inputs(cfg, 1, 1);
  EXPECT_EQ(loaded.forward(in.x, in.t, in.c), m.forward(in.x, in.t, in.c));
}

TEST(Checkpoint, CorruptionAndMismatchAreExplicit) {
  auto cfg = tiny();
  dit::FlowDiT<float> m(cfg, 5);
  auto p = tmp("c.uvdit");
  dit::save_model(p, m, {});
  std::string bytes = io::read_text(p);

  std::string bad = bytes;
  bad[0] = 'X';
  io::write_atomic(tmp("magic.uvdit"), bad);
  EXPECT_THROW(dit::load_model<float>(tmp("magic.uvdit")), FormatError);
  io::write_atomic(tmp("short.uvdit"), bytes.substr(0, bytes.size() - 10));
  EXPECT_THROW(dit::load_model<float>(tmp("short.uvdit")), FormatError);

  auto other = cfg;
  other.token_dim = 32;
  dit::FlowDiT<float> wrong(other, 1);
  try {
    dit::load_weights(p, wrong);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("x_embed.w"), std::string::npos) << e.what();
  }
  auto heads = cfg;
  heads.heads = 4;
  dit::FlowDiT<float> h(heads, 1);
  EXPECT_THROW(dit::load_weights(p, h), FormatError);
}
