#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "cona/error.hpp"
#include "cona/numerics.hpp"
#include "cona/training.hpp"
#include "oracles.hpp"

using namespace cona;

namespace {

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no cona::Error thrown";
  return ErrorKind::IoError;
}

// Small but complete pipeline pieces shared by the loop tests.
struct Tiny {
  DatasetSplit split;
  DualEncoderBundle teachers;

  static Tiny make(std::uint64_t seed = 1) {
    GenerateOptions g;
    g.pairs = 240;
    g.latent_dim = 6;
    g.text_dim = 10;
    g.image_dim = 12;
    g.seed = seed;
    Tiny t{split_dataset(generate_pairs(g), 0.1), {}};
    TeacherConfig tc;
    tc.text_spec = {10, 12, 3, 8};
    tc.image_spec = {12, 12, 3, 8};
    tc.optim.epochs = 3;
    tc.optim.batch_size = 32;
    tc.seed = seed;
    t.teachers = init_teachers(tc);
    pretrain_teacher(t.teachers, t.split.train, tc);
    return t;
  }
};

DistillConfig tiny_distill(const ConaConfig& cona, std::size_t epochs = 2) {
  DistillConfig dc;
  dc.cona = cona;
  dc.optim.epochs = epochs;
  dc.optim.batch_size = 32;
  dc.seed = 5;
  return dc;
}

}  // namespace

TEST(Schedule, Endpoints) {
  const ScheduleSpec s{3e-4, 10000, 50000};
  EXPECT_EQ(lr_at(s, 0), 0.0);
  EXPECT_NEAR(lr_at(s, 10000), 3e-4, 1e-12);
  EXPECT_NEAR(lr_at(s, 50000), 0.0, 1e-12);
}

TEST(Schedule, CosineMidpoint) {
  const ScheduleSpec s{2.0, 100, 1100};
  EXPECT_NEAR(lr_at(s, 600), 1.0, 1e-12);
  EXPECT_NEAR(lr_at(s, 50), 1.0, 1e-12);
}

TEST(Schedule, ContinuousAndNonNegative) {
  const ScheduleSpec s{1e-3, 37, 400};
  for (std::size_t k = 0; k <= s.total_steps; ++k) EXPECT_GE(lr_at(s, k), 0.0);
  EXPECT_NEAR(lr_at(s, 36), lr_at(s, 37), 1e-3 / 37 + 1e-15);
  EXPECT_NEAR(lr_at(s, 38), lr_at(s, 37), 1e-4);
  EXPECT_EQ(kind_of([&] { lr_at(s, 401); }), ErrorKind::StepOutOfRange);
  EXPECT_EQ(lr_at(ScheduleSpec{0.5, 0, 10}, 0), 0.5);
}

TEST(Schedule, DerivedFromOptimConfig) {
  OptimConfig o;
  o.epochs = 5;
  o.batch_size = 256;
  o.warmup_fraction = 0.05;
  EXPECT_EQ(total_steps(9000, o), 36u * 5u);
  const ScheduleSpec s = make_schedule(9000, o);
  EXPECT_EQ(s.total_steps, 180u);
  EXPECT_EQ(s.warmup_steps, 9u);
}

TEST(AdamW, ZeroGradientZeroDecayIsIdentity) {
  Matrix p{{1.5, -2.0}}, g(1, 2, 0.0);
  OptimizerState st;
  st.weight_decay = 0.0;
  const ParamBlock blocks[] = {{&p, &g}};
  for (int k = 0; k < 3; ++k) adamw_step(blocks, st, 0.01);
  EXPECT_EQ(p, (Matrix{{1.5, -2.0}}));
}

TEST(AdamW, LrZeroIsIdentity) {
  Matrix p{{0.3}}, g{{5.0}};
  OptimizerState st;
  const ParamBlock blocks[] = {{&p, &g}};
  adamw_step(blocks, st, 0.0);
  EXPECT_EQ(p(0, 0), 0.3);
}

TEST(AdamW, PureDecayStep) {
  Matrix p{{2.0, -4.0}}, g(1, 2, 0.0);
  OptimizerState st;
  st.weight_decay = 0.1;
  const ParamBlock blocks[] = {{&p, &g}};
  adamw_step(blocks, st, 0.01);
  EXPECT_EQ(p(0, 0), 2.0 * (1 - 0.001));
  EXPECT_EQ(p(0, 1), -4.0 * (1 - 0.001));
}

TEST(AdamW, ThreeStepScalarTrajectory) {
  Matrix p{{0.7}}, g{{1.0}};
  OptimizerState st;
  const ParamBlock blocks[] = {{&p, &g}};
  oracle::ScalarAdamW ref;
  double want = 0.7;
  for (int k = 0; k < 3; ++k) {
    adamw_step(blocks, st, 1e-3);
    want = ref.step(want, 1.0, 1e-3);
    EXPECT_NEAR(p(0, 0), want, 1e-12) << "step " << k + 1;
  }
  // With g = 1 every bias-corrected step is lr·1/(1+eps): check the closed form too.
  double closed = 0.7;
  for (int k = 0; k < 3; ++k) closed = closed * (1 - 1e-4) - 1e-3 / (1 + 1e-8);
  EXPECT_NEAR(p(0, 0), closed, 1e-12);
}

TEST(AdamW, FrozenBlocksUntouchedAndShapesChecked) {
  Matrix a{{1.0}}, ga{{1.0}}, b{{1.0}}, gb{{1.0}};
  OptimizerState st;
  const ParamBlock blocks[] = {{&a, &ga, true}, {&b, &gb, false}};
  for (int k = 0; k < 10; ++k) adamw_step(blocks, st, 0.1);
  EXPECT_EQ(a(0, 0), 1.0);
  EXPECT_NE(b(0, 0), 1.0);

  Matrix c(1, 2), gc(1, 3);
  OptimizerState st2;
  const ParamBlock bad[] = {{&c, &gc}};
  EXPECT_EQ(kind_of([&] { adamw_step(bad, st2, 0.1); }), ErrorKind::ShapeMismatch);
}

TEST(Data, IdentityMapsNoNoiseGivesEqualModalities) {
  GenerateOptions g;
  g.pairs = 50;
  g.latent_dim = g.text_dim = g.image_dim = 5;
  g.noise = 0.0;
  g.identity_maps = true;
  const SyntheticDataset ds = generate_pairs(g);
  EXPECT_EQ(ds.text_inputs, ds.image_inputs);
}

TEST(Data, SameSeedSameData) {
  GenerateOptions g;
  g.pairs = 100;
  g.seed = 42;
  const SyntheticDataset a = generate_pairs(g), b = generate_pairs(g);
  EXPECT_EQ(a.text_inputs, b.text_inputs);
  EXPECT_EQ(a.image_inputs, b.image_inputs);
  g.seed = 43;
  EXPECT_NE(generate_pairs(g).text_inputs, a.text_inputs);
}

TEST(Data, RejectsBadOptions) {
  GenerateOptions g;
  g.pairs = 0;
  EXPECT_ANY_THROW(generate_pairs(g));
  g.pairs = 10;
  g.noise = -1;
  EXPECT_ANY_THROW(generate_pairs(g));
}

TEST(Data, SplitHoldsOutTail) {
  GenerateOptions g;
  g.pairs = 105;
  const SyntheticDataset ds = generate_pairs(g);
  const DatasetSplit s = split_dataset(ds, 0.1);
  EXPECT_EQ(s.train.size(), 95u);
  EXPECT_EQ(s.validation.size(), 10u);
  EXPECT_EQ(s.validation.text_inputs, slice_rows(ds.text_inputs, 95, 105));
}

TEST(Teacher, ZeroEpochsKeepsInitialization) {
  GenerateOptions g;
  g.pairs = 64;
  const SyntheticDataset ds = generate_pairs(g);
  TeacherConfig tc;
  tc.text_spec = {48, 8, 2, 4};
  tc.image_spec = {64, 8, 2, 4};
  tc.optim.epochs = 0;
  DualEncoderBundle b = init_teachers(tc);
  const DualEncoderBundle before = b;
  pretrain_teacher(b, ds, tc);
  EXPECT_EQ(b.at(Role::TextTeacher).params.layers, before.at(Role::TextTeacher).params.layers);
  EXPECT_TRUE(b.at(Role::TextTeacher).params.frozen);
  EXPECT_TRUE(b.at(Role::ImageTeacher).params.frozen);
}

TEST(Teacher, MatchedPairsMoreSimilarThanUnmatchedOnNoiseFreeData) {
  GenerateOptions g;
  g.pairs = 400;
  g.latent_dim = 6;
  g.text_dim = 10;
  g.image_dim = 12;
  g.noise = 0.0;
  const SyntheticDataset ds = generate_pairs(g);
  TeacherConfig tc;
  tc.text_spec = {10, 16, 2, 8};
  tc.image_spec = {12, 16, 2, 8};
  tc.optim.epochs = 5;
  tc.optim.batch_size = 64;
  DualEncoderBundle b = init_teachers(tc);
  std::vector<double> losses;
  pretrain_teacher(b, ds, tc, [&](const nlohmann::json& r) { losses.push_back(r["loss"]); });
  ASSERT_FALSE(losses.empty());

  const Matrix t = forward(b.at(Role::TextTeacher).params, tc.text_spec, ds.text_inputs).matrix();
  const Matrix i = forward(b.at(Role::ImageTeacher).params, tc.image_spec, ds.image_inputs).matrix();
  const Matrix sim = matmul_t(t, i);
  double matched = 0.0, unmatched = 0.0;
  for (std::size_t r = 0; r < sim.rows(); ++r)
    for (std::size_t c = 0; c < sim.cols(); ++c) (r == c ? matched : unmatched) += sim(r, c);
  matched /= static_cast<double>(sim.rows());
  unmatched /= static_cast<double>(sim.rows() * (sim.rows() - 1));
  EXPECT_GT(matched, unmatched);

  // Smoothed trend: the last quarter averages below the first quarter.
  const std::size_t q = losses.size() / 4;
  double first = 0.0, last = 0.0;
  for (std::size_t k = 0; k < q; ++k) {
    first += losses[k];
    last += losses[losses.size() - 1 - k];
  }
  EXPECT_LT(last, first);
}

TEST(Teacher, AcceptsPaperBatchSize) {
  GenerateOptions g;
  g.pairs = 1100;
  g.latent_dim = 4;
  g.text_dim = 6;
  g.image_dim = 6;
  TeacherConfig tc;
  tc.text_spec = {6, 6, 1, 4};
  tc.image_spec = {6, 6, 1, 4};
  tc.optim.epochs = 1;
  tc.optim.batch_size = 1024;
  DualEncoderBundle b = init_teachers(tc);
  std::size_t steps = 0;
  pretrain_teacher(b, generate_pairs(g), tc, [&](const nlohmann::json&) { ++steps; });
  EXPECT_EQ(steps, 2u);
}

class DistillLoop : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { tiny_ = new Tiny(Tiny::make()); }
  static void TearDownTestSuite() { delete tiny_; }
  static Tiny* tiny_;

  DualEncoderBundle with_students(std::size_t layers = 2) const {
    DualEncoderBundle b = tiny_->teachers;
    init_students(b, StudentConfig{layers, layers}, 9);
    return b;
  }
};
Tiny* DistillLoop::tiny_ = nullptr;

TEST_F(DistillLoop, ZeroEpochsKeepsStudentInitialization) {
  DualEncoderBundle b = with_students();
  const DualEncoderBundle before = b;
  distill(b, tiny_->split.train, tiny_->split.validation, tiny_distill(recipe("motis"), 0));
  EXPECT_EQ(b.at(Role::TextStudent).params, before.at(Role::TextStudent).params);
  EXPECT_EQ(b.at(Role::ImageStudent).params, before.at(Role::ImageStudent).params);
}

TEST_F(DistillLoop, TeachersBitIdenticalStudentsMove) {
  for (const char* name : {"motis", "conaclip"}) {
    DualEncoderBundle b = with_students();
    const DualEncoderBundle before = b;
    distill(b, tiny_->split.train, tiny_->split.validation, tiny_distill(recipe(name)));
    EXPECT_EQ(b.at(Role::TextTeacher).params, before.at(Role::TextTeacher).params);
    EXPECT_EQ(b.at(Role::ImageTeacher).params, before.at(Role::ImageTeacher).params);
    EXPECT_NE(b.at(Role::TextStudent).params, before.at(Role::TextStudent).params);
    EXPECT_NE(b.at(Role::ImageStudent).params, before.at(Role::ImageStudent).params);
  }
}

TEST_F(DistillLoop, DeterministicRunsMatchAndSeedsDiffer) {
  auto run = [&](std::uint64_t seed, std::string& log) {
    DualEncoderBundle b = with_students();
    DistillConfig dc = tiny_distill(recipe("conaclip"));
    dc.seed = seed;
    distill(b, tiny_->split.train, tiny_->split.validation, dc,
            [&](const nlohmann::json& r) { log += r.dump() + "\n"; });
    return b;
  };
  std::string la, lb, lc;
  const DualEncoderBundle a = run(3, la), b = run(3, lb), c = run(4, lc);
  EXPECT_EQ(a.at(Role::TextStudent).params, b.at(Role::TextStudent).params);
  EXPECT_EQ(la, lb);
  EXPECT_NE(a.at(Role::TextStudent).params, c.at(Role::TextStudent).params);
}

TEST_F(DistillLoop, ParallelKernelsGiveSameResultAsSerial) {
  auto run = [&](bool deterministic) {
    DualEncoderBundle b = with_students();
    ConaConfig cona = recipe("conaclip");
    cona.deterministic = deterministic;
    distill(b, tiny_->split.train, tiny_->split.validation, tiny_distill(cona, 1));
    return b;
  };
  EXPECT_EQ(run(true).at(Role::ImageStudent).params, run(false).at(Role::ImageStudent).params);
}

TEST_F(DistillLoop, StepAndEpochRecords) {
  DualEncoderBundle b = with_students();
  std::vector<nlohmann::json> recs;
  const DistillResult r = distill(b, tiny_->split.train, tiny_->split.validation,
                                  tiny_distill(recipe("conaclip")),
                                  [&](const nlohmann::json& j) { recs.push_back(j); });
  std::size_t steps = 0, epochs = 0;
  for (const auto& j : recs) {
    if (j["type"] == "step") {
      ++steps;
      EXPECT_EQ(j["terms"].size(), 6u);
      EXPECT_EQ(j["step"].get<std::size_t>(), steps);
      EXPECT_TRUE(j.contains("lr"));
      EXPECT_TRUE(j.contains("loss"));
    } else {
      ++epochs;
      EXPECT_TRUE(j["validation"].contains("text_to_image"));
    }
  }
  EXPECT_EQ(steps, r.steps);
  EXPECT_EQ(steps, 2u * 7u);  // 216 training pairs / batch 32 -> 7 batches
  EXPECT_EQ(epochs, 2u);
  ASSERT_TRUE(r.final_recall);
}

TEST_F(DistillLoop, IntermediatePartsLogOneComponentPerPart) {
  for (PartStrategy ps : {PartStrategy::FD, PartStrategy::SD}) {
    DualEncoderBundle b = with_students(2);
    DistillConfig dc = tiny_distill(recipe("motis"), 1);
    dc.intermediate_parts = 2;
    dc.part_strategy = ps;
    std::size_t seen = 0;
    distill(b, tiny_->split.train, tiny_->split.validation, dc, [&](const nlohmann::json& j) {
      if (j["type"] != "step") return;
      ++seen;
      ASSERT_TRUE(j.contains("parts"));
      EXPECT_EQ(j["parts"].size(), 2u);
    });
    EXPECT_GT(seen, 0u);
  }
}

TEST_F(DistillLoop, RejectsUnfrozenTeachers) {
  DualEncoderBundle b = with_students();
  b.at(Role::TextTeacher).params.frozen = false;
  EXPECT_ANY_THROW(
      distill(b, tiny_->split.train, tiny_->split.validation, tiny_distill(recipe("motis"))));
}

TEST_F(DistillLoop, StudentInitFromTeacherCopiesLayers) {
  const DualEncoderBundle b = with_students(2);
  const auto& t = b.at(Role::TextTeacher).params;
  const auto& s = b.at(Role::TextStudent).params;
  ASSERT_EQ(s.layers.size(), 2u);
  EXPECT_EQ(s.layers[0], t.layers[0]);
  EXPECT_EQ(s.layers[1], t.layers[1]);
  EXPECT_FALSE(s.frozen);

  DualEncoderBundle r = tiny_->teachers;
  init_students(r, StudentConfig{2, 2, StudentInit::Random, StudentInit::Random}, 9);
  EXPECT_NE(r.at(Role::TextStudent).params.layers[0], t.layers[0]);
}
