#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "omniret/model.hpp"
#include "omniret/trainer.hpp"
#include "test_util.hpp"

using namespace omniret;
using omniret::testing::bitwise_equal;
using omniret::testing::random_tensor;

namespace {

DatasetConfig small_data() {
  DatasetConfig cfg;
  cfg.classes = 8;
  cfg.per_class = 6;
  cfg.modalities = {"image", "audio"};
  cfg.tokens_per_item = 4;
  cfg.enc_dim = 10;
  cfg.noise_scale = 0.05;
  cfg.holdout_per_class = 2;
  return cfg;
}

RunSettings tiny_settings(std::uint64_t seed) {
  RunSettings s = RunSettings::desk_default();
  s.seed = seed;
  s.data = small_data();
  s.model.dim = 8;
  s.model.enc_dim = s.data.enc_dim;
  s.model.heads = 2;
  s.model.latents = 2;
  s.model.references = 3;
  s.model.projections = 6;
  s.model.modalities = s.data.modalities;
  s.stage1_tasks = {
      {"uni_image", {"image"}, "image", false, 0},
      {"bind_image_audio", {"image"}, "audio", false, 0},
      {"bind_audio_image", {"audio"}, "image", false, 0},
      {"uni_audio", {"audio"}, "audio", false, 0},
  };
  s.stage2_tasks = s.stage1_tasks;
  s.stage2_tasks.push_back({"comp_image_audio", {"image"}, "audio", true, 1});
  s.train.stage1 = StageConfig{4, 1e-3, 1e-4, 2, 1, 2, 8};
  s.train.stage2 = StageConfig{3, 5e-4, 0.0, 0, 2, 2, 8};
  s.train.shards_per_task = 2;
  s.train.datasets_per_task = 1;
  s.train.log_every = 1;
  return s;
}

}  // namespace

TEST(GenDataset, DeterministicUnderSeed) {
  DatasetConfig cfg = small_data();
  Dataset a = gen_dataset(cfg, 17);
  Dataset b = gen_dataset(cfg, 17);
  ASSERT_EQ(a.items.size(), b.items.size());
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(a.items[i].tokens, b.items[i].tokens));
  }
  Dataset c = gen_dataset(cfg, 18);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.items.size() && !any_diff; ++i) {
    any_diff = !bitwise_equal(a.items[i].tokens, c.items[i].tokens);
  }
  EXPECT_TRUE(any_diff);
}

TEST(GenDataset, ZeroNoiseCollapsesClassItems) {
  DatasetConfig cfg = small_data();
  cfg.noise_scale = 0.0;
  Dataset ds = gen_dataset(cfg, 3);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    const Tensor& first = ds.items[ds.index_of(c, "image", 0)].tokens;
    for (std::size_t k = 1; k < cfg.per_class; ++k) {
      EXPECT_TRUE(bitwise_equal(first, ds.items[ds.index_of(c, "image", k)].tokens));
    }
  }
}

TEST(GenDataset, ItemCountArithmetic) {
  DatasetConfig cfg;
  cfg.classes = 32;
  cfg.per_class = 20;
  cfg.modalities = {"image", "audio", "state"};
  cfg.enc_dim = 24;
  Dataset ds = gen_dataset(cfg, 0);
  EXPECT_EQ(ds.items.size(), 1920u);
}

TEST(GenDataset, NoiseAboveSeparationRefused) {
  DatasetConfig cfg = small_data();
  cfg.noise_scale = 10.0;
  EXPECT_THROW(gen_dataset(cfg, 0), std::invalid_argument);
}

TEST(GenDataset, SameClassSharesPrototypeAcrossModalities) {
  DatasetConfig cfg = small_data();
  cfg.noise_scale = 0.0;
  Dataset ds = gen_dataset(cfg, 5);
  // With zero noise, tokens are exactly prototype x transform; check one.
  const Tensor& item = ds.items[ds.index_of(2, "audio", 0)].tokens;
  const Tensor& a = ds.modality_transforms.at("audio");
  for (std::size_t j = 0; j < cfg.enc_dim; ++j) {
    double expect = 0.0;
    for (std::size_t i = 0; i < cfg.enc_dim; ++i)
      expect += ds.prototypes.at(2, i) * a.at(i, j);
    EXPECT_NEAR(item.at(0, j), expect, 1e-15);
  }
}

// ---------------------------------------------------------------------------
// Batch sampler

TEST(BatchSampler, ExactPerTaskQuota) {
  Dataset ds = gen_dataset(small_data(), 7);
  std::vector<TaskSpec> tasks = {
      {"t0", {"image"}, "audio", false, 0},
      {"t1", {"audio"}, "image", false, 0},
      {"t2", {"image"}, "image", false, 0},
  };
  BatchSampler sampler(ds, tasks, 8, 2, 1, 2, 11);
  for (std::uint64_t b = 0; b < 20; ++b) {
    auto batch = sampler.batch(b);
    ASSERT_EQ(batch.size(), 8u);
    std::map<std::size_t, int> counts;
    for (const auto& s : batch) counts[s.task_id]++;
    EXPECT_EQ(counts.size(), 2u);
    for (const auto& [task, n] : counts) EXPECT_EQ(n, 4);
  }
}

TEST(BatchSampler, AllTasksPresentWhenSelectingAll) {
  Dataset ds = gen_dataset(small_data(), 7);
  std::vector<TaskSpec> tasks = {
      {"t0", {"image"}, "audio", false, 0},
      {"t1", {"audio"}, "image", false, 0},
  };
  BatchSampler sampler(ds, tasks, 8, 2, 2, 2, 12);
  auto batch = sampler.batch(0);
  std::set<std::size_t> seen;
  for (const auto& s : batch) seen.insert(s.task_id);
  EXPECT_EQ(seen.size(), 2u);
}

TEST(BatchSampler, TaskSelectionUniformWithinThreeSigma) {
  Dataset ds = gen_dataset(small_data(), 7);
  std::vector<TaskSpec> tasks;
  for (int i = 0; i < 5; ++i)
    tasks.push_back({"t" + std::to_string(i), {"image"}, "audio", false, 0});
  BatchSampler sampler(ds, tasks, 6, 2, 1, 2, 13);
  const int batches = 1000;
  std::vector<int> hits(tasks.size(), 0);
  for (int b = 0; b < batches; ++b) {
    for (const auto& s : sampler.batch(static_cast<std::uint64_t>(b))) hits[s.task_id] = hits[s.task_id];
    std::set<std::size_t> seen;
    for (const auto& s : sampler.batch(static_cast<std::uint64_t>(b))) seen.insert(s.task_id);
    for (std::size_t t : seen) hits[t]++;
  }
  const double p = 2.0 / 5.0;
  const double mean = batches * p;
  const double sigma = std::sqrt(batches * p * (1 - p));
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    EXPECT_NEAR(hits[t], mean, 3.0 * sigma) << "task " << t;
  }
}

TEST(BatchSampler, DeterministicUnderSeed) {
  Dataset ds = gen_dataset(small_data(), 7);
  std::vector<TaskSpec> tasks = {{"t0", {"image"}, "audio", false, 0},
                                 {"t1", {"audio"}, "image", false, 0}};
  BatchSampler a(ds, tasks, 8, 2, 1, 2, 5);
  BatchSampler b(ds, tasks, 8, 2, 1, 2, 5);
  for (std::uint64_t i = 0; i < 10; ++i) {
    auto ba = a.batch(i), bb = b.batch(i);
    ASSERT_EQ(ba.size(), bb.size());
    for (std::size_t j = 0; j < ba.size(); ++j) {
      EXPECT_EQ(ba[j].query_items, bb[j].query_items);
      EXPECT_EQ(ba[j].target_item, bb[j].target_item);
    }
  }
}

TEST(BatchSampler, ContractErrors) {
  Dataset ds = gen_dataset(small_data(), 7);
  std::vector<TaskSpec> tasks = {{"t0", {"image"}, "audio", false, 0}};
  EXPECT_THROW(BatchSampler(ds, tasks, 7, 2, 1, 2, 0), std::invalid_argument);  // divisibility
  EXPECT_THROW(BatchSampler(ds, tasks, 8, 2, 1, 2, 0), std::invalid_argument);  // too many tasks
  EXPECT_THROW(BatchSampler(ds, {}, 8, 1, 1, 2, 0), std::invalid_argument);
}

TEST(BatchSampler, UnimodalTargetsDifferFromQuery) {
  Dataset ds = gen_dataset(small_data(), 9);
  std::vector<TaskSpec> tasks = {{"uni", {"image"}, "image", false, 0}};
  BatchSampler sampler(ds, tasks, 8, 1, 2, 2, 3);
  for (std::uint64_t b = 0; b < 50; ++b) {
    for (const auto& s : sampler.batch(b)) {
      EXPECT_NE(s.query_items[0], s.target_item);
      EXPECT_EQ(ds.items[s.query_items[0]].class_id, ds.items[s.target_item].class_id);
    }
  }
}

TEST(BatchSampler, ComposedTasksShiftClassDeterministically) {
  Dataset ds = gen_dataset(small_data(), 9);
  std::vector<TaskSpec> tasks = {{"comp", {"image"}, "audio", true, 3}};
  BatchSampler sampler(ds, tasks, 8, 1, 2, 2, 3);
  for (const auto& s : sampler.batch(0)) {
    EXPECT_EQ(s.target_class, (s.source_class + 3) % ds.config.classes);
    EXPECT_EQ(ds.items[s.target_item].class_id, s.target_class);
  }
}

// ---------------------------------------------------------------------------
// Toy composer

TEST(ToyComposer, OutputLengthIsTotalTokensPlusMarker) {
  Rng rng(1);
  ComposerParams cp = ComposerParams::init(6, 2, 4, rng);
  Tape t(false);
  ComposerVars cv;
  cv.block = load_block(t, cp.block, false);
  cv.slot_embeddings = t.constant(cp.slot_embeddings);
  cv.query_marker = t.constant(cp.query_marker);
  cv.candidate_marker = t.constant(cp.candidate_marker);
  std::vector<Var> sets = {t.constant(random_tensor({3, 6}, rng)),
                           t.constant(random_tensor({2, 6}, rng))};
  Var out = toy_composer(t, cv, sets, cv.query_marker);
  EXPECT_EQ(t.value(out).rows(), 6u);  // 3 + 2 + 1
  EXPECT_EQ(t.value(out).cols(), 6u);
}

TEST(ToyComposer, SetOrderMatters) {
  Rng rng(2);
  ComposerParams cp = ComposerParams::init(6, 2, 4, rng);
  Tensor a = random_tensor({2, 6}, rng);
  Tensor b = random_tensor({2, 6}, rng);
  auto run = [&](const Tensor& first, const Tensor& second) {
    Tape t(false);
    ComposerVars cv;
    cv.block = load_block(t, cp.block, false);
    cv.slot_embeddings = t.constant(cp.slot_embeddings);
    cv.query_marker = t.constant(cp.query_marker);
    cv.candidate_marker = t.constant(cp.candidate_marker);
    Var out = toy_composer(t, cv, {t.constant(first), t.constant(second)}, cv.query_marker);
    return t.value(out);
  };
  Tensor ab = run(a, b);
  Tensor ba = run(b, a);
  double diff = 0.0;
  // Compare the states of set "a" in both orders (rows 0,1 vs rows 2,3).
  for (std::size_t j = 0; j < 6; ++j) {
    diff = std::max(diff, std::fabs(ab.at(0, j) - ba.at(2, j)));
  }
  EXPECT_GT(diff, 1e-8);
}

TEST(ToyComposer, SnapshotSeed0) {
  // Frozen by tests/oracles/gen_snapshots.py before this module was built.
  Rng rng(0);
  Tensor resampled = random_tensor({2, 4}, rng);
  ComposerParams cp = ComposerParams::init(4, 2, 3, rng);
  Tape t(false);
  ComposerVars cv;
  cv.block = load_block(t, cp.block, false);
  cv.slot_embeddings = t.constant(cp.slot_embeddings);
  cv.query_marker = t.constant(cp.query_marker);
  cv.candidate_marker = t.constant(cp.candidate_marker);
  Var out = toy_composer(t, cv, {t.constant(resampled)}, cv.query_marker);
  Tensor expect({3, 4},
                {-1.0414050787462432, 0.19991523455363253, 3.1695490756727134,
                 -2.1320474208024875, -1.280979282851683, 0.9643708765441297,
                 0.6066340494570781, -2.8091872942546496, -0.1948761118582381,
                 -0.6677076806733783, 0.47999361932443363, -1.733524758029988});
  EXPECT_TENSOR_NEAR(t.value(out), expect, 1e-9);
}

TEST(ToyComposer, RejectsMoreSetsThanSlots) {
  Rng rng(3);
  ComposerParams cp = ComposerParams::init(4, 2, 1, rng);
  Tape t(false);
  ComposerVars cv;
  cv.block = load_block(t, cp.block, false);
  cv.slot_embeddings = t.constant(cp.slot_embeddings);
  cv.query_marker = t.constant(cp.query_marker);
  cv.candidate_marker = t.constant(cp.candidate_marker);
  std::vector<Var> sets = {t.constant(random_tensor({2, 4}, rng)),
                           t.constant(random_tensor({2, 4}, rng))};
  EXPECT_THROW(toy_composer(t, cv, sets, cv.query_marker), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Recall and the pooling baseline

TEST(RecallAtK, HandCases) {
  Tensor cands = Tensor::matrix({{1, 0}, {0.5, std::sqrt(0.75)}});
  Tensor queries = Tensor::matrix({{1, 0}});
  EXPECT_EQ(recall_at_k(queries, cands, {0}, 1), 1.0);
  EXPECT_EQ(recall_at_k(queries, cands, {1}, 2), 1.0);  // k = C
}

TEST(RecallAtK, HandConstructedCosineTable) {
  auto at_angle = [](double deg) {
    const double r = deg * M_PI / 180.0;
    return std::vector<double>{std::cos(r), std::sin(r)};
  };
  Tensor cands = Tensor::zeros({4, 2});
  const double angles_c[4] = {0, 30, 60, 90};
  for (std::size_t i = 0; i < 4; ++i) {
    auto v = at_angle(angles_c[i]);
    cands.mut_data()[2 * i] = v[0];
    cands.mut_data()[2 * i + 1] = v[1];
  }
  Tensor queries = Tensor::zeros({3, 2});
  const double angles_q[3] = {5, 85, 55};
  for (std::size_t i = 0; i < 3; ++i) {
    auto v = at_angle(angles_q[i]);
    queries.mut_data()[2 * i] = v[0];
    queries.mut_data()[2 * i + 1] = v[1];
  }
  // Nearest candidates are c0, c3, c2; golds are c0, c1, c2 -> 2 of 3 hit.
  EXPECT_NEAR(recall_at_k(queries, cands, {0, 1, 2}, 1), 2.0 / 3.0, 1e-15);
}

TEST(RecallAtK, TiesBreakTowardLowerCandidateIndex) {
  Tensor cands = Tensor::matrix({{1, 0}, {1, 0}, {0, 1}});
  Tensor queries = Tensor::matrix({{1, 0}});
  EXPECT_EQ(recall_at_k(queries, cands, {0}, 1), 1.0);  // index 0 wins the tie
  EXPECT_EQ(recall_at_k(queries, cands, {1}, 1), 0.0);  // index 1 loses it
}

TEST(RecallAtK, Errors) {
  Tensor q = Tensor::matrix({{1, 0}});
  Tensor c = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_THROW(recall_at_k(q, c, {5}, 1), std::out_of_range);
  EXPECT_THROW(recall_at_k(q, c, {0}, 3), std::invalid_argument);
}

TEST(MeanPoolBaseline, HandCases) {
  EXPECT_TRUE(bitwise_equal(mean_pool_baseline(Tensor::matrix({{3, -1, 2}})),
                            Tensor::matrix({{3, -1, 2}})));
  Tensor cancel = mean_pool_baseline(Tensor::matrix({{1, 2}, {-1, -2}}));
  EXPECT_EQ(cancel.at(0, 0), 0.0);
  EXPECT_EQ(cancel.at(0, 1), 0.0);
  Tensor avg = mean_pool_baseline(Tensor::matrix({{1, 3}, {3, 1}}));
  EXPECT_EQ(avg.at(0, 0), 2.0);
  EXPECT_EQ(avg.at(0, 1), 2.0);
}

// ---------------------------------------------------------------------------
// Trainer mechanics (tiny configs; the full-scale behavior lives in the
// acceptance suite)

TEST(Trainer, ZeroLearningRateLeavesParametersBitIdentical) {
  RunSettings s = tiny_settings(1);
  s.train.stage1.lr = 0.0;
  s.train.stage1.min_lr = 0.0;
  s.train.stage2.lr = 0.0;
  s.train.stage2.min_lr = 0.0;
  Trainer trainer(s);
  std::map<std::string, Tensor> before;
  for (const ParamRef& r : collect_params(trainer.state().params)) before.emplace(r.name, *r.tensor);
  trainer.run(nullptr);
  for (const ParamRef& r : collect_params(trainer.state().params)) {
    EXPECT_TRUE(bitwise_equal(before.at(r.name), *r.tensor)) << r.name;
  }
}

TEST(Trainer, MetricsStreamIsDeterministic) {
  CollectingSink a, b;
  Trainer(tiny_settings(7)).run(&a);
  Trainer(tiny_settings(7)).run(&b);
  ASSERT_EQ(a.records().size(), b.records().size());
  for (std::size_t i = 0; i < a.records().size(); ++i) {
    EXPECT_EQ(metric_to_jsonl(a.records()[i]), metric_to_jsonl(b.records()[i]));
  }
}

TEST(Trainer, ResumeFromCheckpointMatchesUninterruptedRun) {
  RunSettings s = tiny_settings(3);
  // Uninterrupted run, recording the loss at each step.
  Trainer full(s);
  std::vector<double> full_losses;
  while (full.state().step < full.total_steps()) {
    full_losses.push_back(full.optimizer_step().total);
  }

  // Interrupted run: stop after 3 steps, checkpoint, restore, continue.
  Trainer first(s);
  std::vector<double> resumed_losses;
  for (int i = 0; i < 3; ++i) resumed_losses.push_back(first.optimizer_step().total);
  Checkpoint ckpt = first.make_checkpoint("{}");

  Trainer second(s);
  second.restore(ckpt);
  EXPECT_EQ(second.state().step, 3u);
  while (second.state().step < second.total_steps()) {
    resumed_losses.push_back(second.optimizer_step().total);
  }
  ASSERT_EQ(full_losses.size(), resumed_losses.size());
  for (std::size_t i = 0; i < full_losses.size(); ++i) {
    EXPECT_EQ(full_losses[i], resumed_losses[i]) << "step " << i;
  }
}

TEST(Trainer, NonFiniteLossAbortsWithDiagnosticDump) {
  RunSettings s = tiny_settings(4);
  const std::string dir = ::testing::TempDir() + "omniret_nan_dump";
  std::filesystem::create_directories(dir);
  s.out_dir = dir;
  Trainer trainer(s);
  // Poison one parameter; the loss must come out non-finite and abort.
  trainer.state().params.composer.query_marker.mut_data()[0] =
      std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(trainer.optimizer_step(), std::runtime_error);
  EXPECT_TRUE(std::filesystem::exists(dir + "/diagnostic_batch.json"));
  std::filesystem::remove_all(dir);
}

TEST(Trainer, StageScheduleFreezesComposerInStageOne) {
  RunSettings s = tiny_settings(5);
  Trainer trainer(s);
  Tensor composer_before = trainer.state().params.composer.block.wq;
  Tensor pool_before = trainer.state().params.pool.sliced_references;
  // Run stage 1 only.
  trainer.run(nullptr, s.train.stage1.steps);
  EXPECT_TRUE(bitwise_equal(composer_before, trainer.state().params.composer.block.wq));
  EXPECT_FALSE(bitwise_equal(pool_before, trainer.state().params.pool.sliced_references));
  // One stage-2 step moves the composer.
  trainer.optimizer_step();
  EXPECT_FALSE(bitwise_equal(composer_before, trainer.state().params.composer.block.wq));
}

TEST(Trainer, SlicersStayUnitNorm) {
  RunSettings s = tiny_settings(6);
  Trainer trainer(s);
  trainer.run(nullptr, 4);
  const Tensor& slicers = trainer.state().params.pool.slicers;
  for (std::size_t i = 0; i < slicers.rows(); ++i) {
    double n = 0.0;
    for (std::size_t j = 0; j < slicers.cols(); ++j) n += slicers.at(i, j) * slicers.at(i, j);
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
  }
}

TEST(Trainer, EvalMatchesTrainingLogRecallExactly) {
  RunSettings s = tiny_settings(8);
  CollectingSink sink;
  Trainer trainer(s);
  EvalReport report = trainer.run(&sink);
  // Rebuild a fresh trainer from the checkpoint and re-evaluate.
  Checkpoint ckpt = trainer.make_checkpoint("{}");
  Trainer evaluator(s);
  evaluator.restore(ckpt);
  EvalReport again = evaluator.evaluate();
  for (const auto& [task, value] : report.recall_per_task) {
    EXPECT_EQ(value, again.recall_per_task.at(task)) << task;
  }
  EXPECT_EQ(report.offdiag_abs_cos, again.offdiag_abs_cos);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  RunSettings s = tiny_settings(9);
  Trainer trainer(s);
  trainer.run(nullptr, 2);
  Checkpoint ckpt = trainer.make_checkpoint(std::string("{\"seed\": 9}"));
  const std::string path = ::testing::TempDir() + "roundtrip.oret";
  write_checkpoint(path, ckpt);
  Checkpoint read = read_checkpoint(path);
  EXPECT_EQ(read.step, ckpt.step);
  EXPECT_EQ(read.config_json, ckpt.config_json);
  ASSERT_EQ(read.tensors.size(), ckpt.tensors.size());
  for (const auto& [name, tensor] : ckpt.tensors) {
    ASSERT_TRUE(read.tensors.count(name)) << name;
    EXPECT_TRUE(bitwise_equal(tensor, read.tensors.at(name))) << name;
  }
  std::filesystem::remove(path);
}

TEST(VideoPath, VideoItemsEmbedThroughTheFullPipeline) {
  RunSettings s = tiny_settings(10);
  s.data.modalities = {"image", "video"};
  s.data.video_grid = {2, 2, 2};
  s.model.modalities = s.data.modalities;
  s.model.video_target = {2, 1, 2};
  s.model.t_max = 4;
  s.stage1_tasks = {{"bind_video_image", {"video"}, "image", false, 0},
                    {"bind_image_video", {"image"}, "video", false, 0}};
  s.stage2_tasks = s.stage1_tasks;
  s.train.stage1.tasks_per_batch = 2;
  s.train.stage2.tasks_per_batch = 2;
  Trainer trainer(s);
  LossBreakdown bd = trainer.optimizer_step();
  EXPECT_TRUE(std::isfinite(bd.total));
  EXPECT_GT(trainer.evaluate().recall_per_task.count("bind_video_image"), 0u);
}
