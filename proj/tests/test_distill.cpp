#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "medlab/data.hpp"
#include "medlab/distill.hpp"
#include "medlab/optim.hpp"
#include "medlab/pretrain.hpp"
#include "support/test_util.hpp"

using namespace medlab;
using namespace medlab::testing;

namespace {

ModelConfig cfg_of(int64_t dim, int64_t heads, int64_t layers) {
  ModelConfig c;
  c.vision = {dim, heads, layers, 4, 8, 3, 0};
  c.text = {dim, heads, layers, 22, 16, -1, 0};
  c.decoder.n_layers = layers;
  return c;
}

Batch toy_batch(int64_t B, uint64_t seed) {
  Vocabulary vocab;
  DatasetSpec spec;
  spec.seed = seed;
  spec.n_train = B;
  spec.n_eval = 2;
  spec.image_size = 8;
  auto [train, eval] = generate_dataset(spec, vocab);
  Rng rng(seed);
  return make_batches(train, B, rng)[0];
}

DistillPlan full_plan(int64_t common) {
  DistillPlan p;
  p.channels = {Channel::Img, Channel::Text, Channel::VL_E, Channel::VL_D};
  p.common_dim = common;
  return p;
}

}  // namespace

TEST_CASE("self-distillation fixed point: identical models give zero losses") {
  ModelConfig cfg = cfg_of(16, 2, 2);
  MEDModel teacher = MEDModel::build(cfg, DType::F64, Rng(3));
  MEDModel student = teacher.clone();
  Batch batch = toy_batch(3, 5);
  Tensor images = batch.images.to_dtype(DType::F64);

  Graph tg(DType::F64);
  ForwardTrace ttr = forward_collect(tg, teacher, images, batch.tokens);
  TraceSnapshot snap = snapshot_trace(tg, ttr, teacher);

  Graph sg(DType::F64);
  ForwardTrace str_ = forward_collect(sg, student, images, batch.tokens);

  DistillPlan plan = full_plan(16);
  DistillProjections proj = DistillProjections::identity(plan, cfg, cfg, DType::F64);
  Var hr = hr_loss(sg, snap, str_, plan, proj);
  Var at = at_loss(sg, snap, str_, plan);
  CHECK(std::abs(sg.value(hr).at(0)) <= 1e-12);
  CHECK(std::abs(sg.value(at).at(0)) <= 1e-12);
}

TEST_CASE("antipodal projected states give the maximal cosine loss of 2") {
  Rng rng(7);
  Tensor states = rand_tensor({2, 3, 4}, rng, 0.5, 1.5);
  Tensor negated = states;
  negated.scale_inplace(-1.0);

  Graph g(DType::F64);
  ForwardTrace student;
  student.batch = 2;
  student.vision_final = g.constant(negated);
  TraceSnapshot snap;
  snap.batch = 2;
  snap.vision_final = states;

  DistillPlan plan;
  plan.channels = {Channel::Img};
  plan.common_dim = 4;
  DistillProjections proj;
  ModelConfig dummy = cfg_of(4, 2, 1);
  proj = DistillProjections::identity(plan, dummy, dummy, DType::F64);
  Var hr = hr_loss(g, snap, student, plan, proj);
  CHECK(g.value(hr).at(0) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("attention KL closed form: [0.5,0.5] vs [0.9,0.1]") {
  Graph g(DType::F64);
  ForwardTrace student;
  student.batch = 1;
  AttentionRecord rec;
  rec.kind = AttnKind::Self;
  rec.heads = 1;
  rec.batch = 1;
  rec.q_len = 1;
  rec.kv_len = 2;
  rec.probs = g.constant(Tensor::from_values({1, 1, 2}, {0.9, 0.1}, DType::F64));
  student.vision_attn.push_back(rec);

  TraceSnapshot snap;
  snap.batch = 1;
  snap.vision_heads = 1;
  snap.vision_self_probs = Tensor::from_values({1, 1, 2}, {0.5, 0.5}, DType::F64);

  DistillPlan plan;
  plan.channels = {Channel::Img};
  plan.at_cross = false;
  Var at = at_loss(g, snap, student, plan);
  double want = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  CHECK(g.value(at).at(0) == doctest::Approx(want).epsilon(1e-12));
  CHECK(g.value(at).at(0) == doctest::Approx(0.5108).epsilon(1e-3));
}

TEST_CASE("attention KL is nonnegative over 1000 random row-stochastic pairs") {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    int64_t d = 2 + static_cast<int64_t>(rng.below(6));
    auto random_row = [&]() {
      std::vector<double> v(static_cast<size_t>(d));
      double s = 0;
      for (auto& x : v) {
        x = rng.uniform(1e-6, 1.0);
        s += x;
      }
      for (auto& x : v) x /= s;
      return v;
    };
    Graph g(DType::F64);
    Tensor t = Tensor::from_values({1, d}, random_row(), DType::F64);
    Tensor s = Tensor::from_values({1, d}, random_row(), DType::F64);
    Var kl = g.kl_rows_const_teacher(t, g.constant(s));
    CHECK(g.value(kl).at(0) >= -1e-15);
  }
}

TEST_CASE("attention KL stays finite when student probabilities underflow") {
  Graph g(DType::F64);
  Tensor t = Tensor::from_values({1, 2}, {0.5, 0.5}, DType::F64);
  Tensor s = Tensor::from_values({1, 2}, {1.0, 0.0}, DType::F64);  // hard zero
  Var kl = g.kl_rows_const_teacher(t, g.constant(s));
  CHECK(std::isfinite(g.value(kl).at(0)));
}

TEST_CASE("head-count mismatch is bridged by head averaging") {
  Graph g(DType::F64);
  // teacher: 2 heads with rows [1,0] and [0,1]; head mean = [0.5,0.5]
  TraceSnapshot snap;
  snap.batch = 1;
  snap.vision_heads = 2;
  snap.vision_self_probs = Tensor::from_values({2, 1, 2}, {1, 0, 0, 1}, DType::F64);
  ForwardTrace student;
  student.batch = 1;
  AttentionRecord rec;
  rec.heads = 1;
  rec.batch = 1;
  rec.q_len = 1;
  rec.kv_len = 2;
  rec.probs = g.constant(Tensor::from_values({1, 1, 2}, {0.9, 0.1}, DType::F64));
  student.vision_attn.push_back(rec);

  DistillPlan plan;
  plan.channels = {Channel::Img};
  plan.at_cross = false;
  Var at = at_loss(g, snap, student, plan);
  double want = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  CHECK(g.value(at).at(0) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("hr channel additivity: multi-channel loss is the mean of single channels") {
  ModelConfig tcfg = cfg_of(16, 2, 2);
  ModelConfig scfg = cfg_of(8, 2, 2);
  MEDModel teacher = MEDModel::build(tcfg, DType::F64, Rng(13));
  MEDModel student = MEDModel::build(scfg, DType::F64, Rng(17));
  Batch batch = toy_batch(3, 19);
  Tensor images = batch.images.to_dtype(DType::F64);

  Graph tg(DType::F64);
  TraceSnapshot snap = snapshot_trace(tg, forward_collect(tg, teacher, images, batch.tokens), teacher);
  Graph sg(DType::F64);
  ForwardTrace str_ = forward_collect(sg, student, images, batch.tokens);

  DistillPlan both;
  both.channels = {Channel::Img, Channel::Text};
  both.common_dim = 12;
  DistillProjections proj = DistillProjections::init(both, tcfg, scfg, DType::F64, Rng(23));

  DistillPlan only_img = both;
  only_img.channels = {Channel::Img};
  DistillPlan only_txt = both;
  only_txt.channels = {Channel::Text};

  Var l_both = hr_loss(sg, snap, str_, both, proj);
  Var l_img = hr_loss(sg, snap, str_, only_img, proj);
  Var l_txt = hr_loss(sg, snap, str_, only_txt, proj);
  CHECK(sg.value(l_both).at(0) ==
        doctest::Approx(0.5 * (sg.value(l_img).at(0) + sg.value(l_txt).at(0))).epsilon(1e-12));
}

TEST_CASE("teacher receives no gradient from the distillation objective") {
  ModelConfig tcfg = cfg_of(16, 4, 2);
  ModelConfig scfg = cfg_of(8, 2, 2);
  MEDModel teacher = MEDModel::build(tcfg, DType::F64, Rng(29));
  MEDModel student = MEDModel::build(scfg, DType::F64, Rng(31));
  student.set_requires_grad(true);
  Batch batch = toy_batch(3, 37);
  Tensor images = batch.images.to_dtype(DType::F64);

  Graph tg(DType::F64);
  TraceSnapshot snap = snapshot_trace(tg, forward_collect(tg, teacher, images, batch.tokens), teacher);

  DistillPlan plan = full_plan(12);
  DistillProjections proj = DistillProjections::init(plan, tcfg, scfg, DType::F64, Rng(41));
  proj.set_requires_grad(true);

  Graph sg(DType::F64);
  Rng itm_rng(43);
  PretrainParams pp;
  PretrainOutputs out = pretrain_losses(sg, student, batch, nullptr, itm_rng, pp);
  Var hr = hr_loss(sg, snap, out.trace, plan, proj);
  Var at = at_loss(sg, snap, out.trace, plan);
  Var total = combined_objective(sg, out.vlp, at, hr, plan);
  sg.backward(total);

  teacher.for_each_param([](const std::string& name, Tensor& p) {
    INFO("teacher param ", name);
    CHECK_FALSE(p.has_grad());
  });
  // student and projections do train
  double snorm = 0;
  student.for_each_param([&](const std::string&, Tensor& p) {
    if (p.has_grad()) snorm += p.grad().l2_norm_sq();
  });
  CHECK(snorm > 0);
  double pnorm = 0;
  proj.for_each_param([&](const std::string&, Tensor& p) {
    if (p.has_grad()) pnorm += p.grad().l2_norm_sq();
  });
  CHECK(pnorm > 0);
}

TEST_CASE("combined objective sums with default weights and drops absent terms") {
  Graph g(DType::F64);
  DistillPlan plan = full_plan(8);
  Var vlp = g.constant(Tensor::scalar(1.0, DType::F64));
  Var at = g.constant(Tensor::scalar(0.2, DType::F64));
  Var hr = g.constant(Tensor::scalar(0.3, DType::F64));
  CHECK(g.value(combined_objective(g, vlp, at, hr, plan)).at(0) == doctest::Approx(1.5));

  plan.use_at = false;
  CHECK(g.value(combined_objective(g, vlp, Var{}, hr, plan)).at(0) == doctest::Approx(1.3));
  plan.use_at = true;
  plan.alpha = 0.0;
  Var t = combined_objective(g, vlp, at, hr, plan);
  CHECK(g.value(t).at(0) == doctest::Approx(1.0));
}

TEST_CASE("disabling attention transfer leaves gradients equal to vlp+hr alone") {
  ModelConfig cfg = cfg_of(8, 2, 1);
  MEDModel teacher = MEDModel::build(cfg, DType::F64, Rng(47));
  MEDModel student = MEDModel::build(cfg, DType::F64, Rng(53));
  student.set_requires_grad(true);
  Batch batch = toy_batch(2, 59);
  Tensor images = batch.images.to_dtype(DType::F64);
  Graph tg(DType::F64);
  TraceSnapshot snap = snapshot_trace(tg, forward_collect(tg, teacher, images, batch.tokens), teacher);
  DistillPlan plan;
  plan.channels = {Channel::Img, Channel::VL_E};
  plan.common_dim = 8;
  DistillProjections proj = DistillProjections::identity(plan, cfg, cfg, DType::F64);

  auto grads = [&](bool with_at) {
    student.zero_grads();
    Graph sg(DType::F64);
    Rng itm_rng(61);
    PretrainParams pp;
    PretrainOutputs out = pretrain_losses(sg, student, batch, nullptr, itm_rng, pp);
    Var hr = hr_loss(sg, snap, out.trace, plan, proj);
    Var at = with_at ? at_loss(sg, snap, out.trace, plan) : Var{};
    DistillPlan p2 = plan;
    p2.use_at = with_at;
    sg.backward(combined_objective(sg, out.vlp, at, hr, p2));
    std::vector<double> flat;
    student.for_each_param([&](const std::string&, Tensor& p) {
      for (int64_t i = 0; i < p.numel(); ++i) flat.push_back(p.has_grad() ? p.grad().at(i) : 0.0);
    });
    return flat;
  };

  auto no_at = grads(false);
  // reference: explicit vlp + hr sum without any at term in the graph
  student.zero_grads();
  Graph sg(DType::F64);
  Rng itm_rng(61);
  PretrainParams pp;
  PretrainOutputs out = pretrain_losses(sg, student, batch, nullptr, itm_rng, pp);
  Var hr = hr_loss(sg, snap, out.trace, plan, proj);
  sg.backward(sg.add(out.vlp, hr));
  std::vector<double> ref;
  student.for_each_param([&](const std::string&, Tensor& p) {
    for (int64_t i = 0; i < p.numel(); ++i) ref.push_back(p.has_grad() ? p.grad().at(i) : 0.0);
  });
  REQUIRE(no_at.size() == ref.size());
  for (size_t i = 0; i < ref.size(); ++i) CHECK(no_at[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("lambda sweep scales only the distillation gradient") {
  ModelConfig cfg = cfg_of(8, 2, 1);
  MEDModel teacher = MEDModel::build(cfg, DType::F64, Rng(67));
  MEDModel student = MEDModel::build(cfg, DType::F64, Rng(71));
  student.set_requires_grad(true);
  Batch batch = toy_batch(2, 73);
  Tensor images = batch.images.to_dtype(DType::F64);
  Graph tg(DType::F64);
  TraceSnapshot snap = snapshot_trace(tg, forward_collect(tg, teacher, images, batch.tokens), teacher);
  DistillPlan plan;
  plan.channels = {Channel::Img};
  plan.common_dim = 8;
  DistillProjections proj = DistillProjections::identity(plan, cfg, cfg, DType::F64);

  auto grads = [&](double lambda_hr) {
    student.zero_grads();
    Graph sg(DType::F64);
    Rng itm_rng(79);
    PretrainParams pp;
    PretrainOutputs out = pretrain_losses(sg, student, batch, nullptr, itm_rng, pp);
    DistillPlan p2 = plan;
    p2.lambda_hr = lambda_hr;
    p2.use_at = false;
    Var hr = hr_loss(sg, snap, out.trace, p2, proj);
    sg.backward(combined_objective(sg, out.vlp, Var{}, hr, p2));
    std::vector<double> flat;
    student.for_each_param([&](const std::string&, Tensor& p) {
      for (int64_t i = 0; i < p.numel(); ++i) flat.push_back(p.has_grad() ? p.grad().at(i) : 0.0);
    });
    return flat;
  };
  auto g0 = grads(0.0), g1 = grads(1.0), g2 = grads(2.0);
  for (size_t i = 0; i < g0.size(); ++i) {
    double d1 = g1[i] - g0[i];
    double d2 = g2[i] - g0[i];
    CHECK(d2 == doctest::Approx(2.0 * d1).epsilon(1e-7).scale(std::max(1.0, std::abs(d1))));
  }
}

TEST_CASE("sequence-length mismatch names the offending channel") {
  Graph g(DType::F64);
  TraceSnapshot snap;
  snap.batch = 1;
  snap.vision_final = Tensor::zeros({1, 5, 4}, DType::F64);
  ForwardTrace student;
  student.batch = 1;
  student.vision_final = g.constant(Tensor::zeros({1, 3, 4}, DType::F64));
  DistillPlan plan;
  plan.channels = {Channel::Img};
  plan.common_dim = 4;
  ModelConfig dummy = cfg_of(4, 2, 1);
  DistillProjections proj = DistillProjections::identity(plan, dummy, dummy, DType::F64);
  try {
    hr_loss(g, snap, student, plan, proj);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("img") != std::string::npos);
  }
}

TEST_CASE("vl_d channel requires decoders on both sides") {
  ModelConfig with_dec = cfg_of(8, 2, 1);
  ModelConfig no_dec = with_dec;
  no_dec.decoder.n_layers = 0;
  DistillPlan plan;
  plan.channels = {Channel::VL_D};
  CHECK_THROWS_AS(plan.validate(with_dec, no_dec), ConfigError);
  CHECK_THROWS_AS(plan.validate(no_dec, with_dec), ConfigError);
  CHECK_NOTHROW(plan.validate(with_dec, with_dec));
}

TEST_CASE("hr loss decreases when optimizing student and projections (smoke)") {
  ModelConfig tcfg = cfg_of(12, 2, 1);
  ModelConfig scfg = cfg_of(8, 2, 1);
  MEDModel teacher = MEDModel::build(tcfg, DType::F64, Rng(83));
  MEDModel student = MEDModel::build(scfg, DType::F64, Rng(89));
  student.set_requires_grad(true);
  Batch batch = toy_batch(2, 97);
  Tensor images = batch.images.to_dtype(DType::F64);

  Graph tg(DType::F64);
  TraceSnapshot snap = snapshot_trace(tg, forward_collect(tg, teacher, images, batch.tokens), teacher);

  DistillPlan plan;
  plan.channels = {Channel::Img, Channel::Text};
  plan.common_dim = 10;
  DistillProjections proj = DistillProjections::init(plan, tcfg, scfg, DType::F64, Rng(101));
  proj.set_requires_grad(true);

  OptimParams op;
  op.peak_lr = 2e-3;
  op.warmup_steps = 10;
  op.decay_interval = 0;
  op.weight_decay = 0.0;
  AdamW opt(op);
  student.for_each_param([&](const std::string& n, Tensor& p) { opt.add_param(n, &p); });
  proj.for_each_param([&](const std::string& n, Tensor& p) { opt.add_param(n, &p); });

  std::vector<double> losses;
  for (int stepi = 0; stepi < 200; ++stepi) {
    opt.zero_grads();
    Graph sg(DType::F64);
    ForwardTrace str_;
    Var vf = vision_forward(sg, student, images, &str_);
    text_forward(sg, student, batch.tokens, TextMode::Unimodal, vf, &str_);
    Var hr = hr_loss(sg, snap, str_, plan, proj);
    losses.push_back(sg.value(hr).at(0));
    sg.backward(hr);
    opt.step();
  }
  CHECK(losses.back() < 0.5 * losses.front());
  // near-monotone: upticks are rare and small for a smooth full-batch objective
  int increases = 0;
  for (size_t i = 1; i < losses.size(); ++i)
    if (losses[i] > losses[i - 1] + 1e-12) ++increases;
  CHECK(increases <= 20);
}
