#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "shapecomp/nn/checkpoint.hpp"
#include "shapecomp/trainer.hpp"

using namespace shapecomp;

namespace {

ExperimentConfig small_experiment() {
    ExperimentConfig e;
    e.data.c = 16;
    e.data.n_train = 6;
    e.data.n_val = 2;
    e.data.n_test = 2;
    e.data.val_cases = 2;
    e.data.test_cases = 4;
    e.model.c = 16;
    e.model.depth = 2;
    e.model.base_channels = 2;
    e.model.latent_dim = 2;
    e.model.posterior_stages = 2;
    e.train.epochs = 2;
    e.train.batch_size = 3;
    e.seeds = {1};
    return e;
}

const Dataset& small_data() {
    // Shapes fill most of a 16^3 grid, so augmentation clipping warnings are expected here.
    log::set_level(log::Level::error);
    static const Dataset d = make_dataset(small_experiment().data);
    return d;
}

}  // namespace

TEST(Schedule, LearningRateAtEpochTen) {
    TrainConfig t;
    EXPECT_NEAR(t.lr_at(10), 8.17e-3, 5e-6);
    EXPECT_NEAR(t.lr_at(10) / (1e-2 * std::pow(0.98, 10)), 1.0, 1e-12);
    EXPECT_EQ(t.lr_at(0), 1e-2);
}

TEST(Objectives, NamesAndModes) {
    for (Objective o : {Objective::dice_whole, Objective::dice_target, Objective::vwdice, Objective::cvae_basic,
                        Objective::cvae_vwdice_tw})
        EXPECT_EQ(objective_from_string(to_string(o)), o);
    EXPECT_THROW(objective_from_string("dice"), InvalidArgument);
    EXPECT_EQ(mode_for(Objective::vwdice), ModelMode::deterministic);
    EXPECT_EQ(mode_for(Objective::cvae_basic), ModelMode::probabilistic);
}

TEST(Configs, ExperimentJsonRoundTrip) {
    ExperimentConfig e = small_experiment();
    e.train.objective = Objective::cvae_vwdice_tw;
    e.arms = {Objective::vwdice, Objective::dice_target};
    const ExperimentConfig back = nlohmann::json(e).get<ExperimentConfig>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(e));
    EXPECT_EQ(back.model.c, back.data.c);
}

TEST(Configs, RejectsInvalidTraining) {
    TrainConfig t;
    t.lr0 = 0;
    EXPECT_THROW(t.validate(), InvalidArgument);
    t = TrainConfig{};
    t.lr_decay = 1.5;
    EXPECT_THROW(t.validate(), InvalidArgument);
}

TEST(Batches, DeterministicGivenSeeds) {
    TrainConfig t;
    t.objective = Objective::cvae_vwdice_tw;
    const LossConfig lc;
    const Batch a = make_batch(small_data().train, {0, 3}, {11, 12}, t, lc);
    const Batch b = make_batch(small_data().train, {0, 3}, {11, 12}, t, lc);
    ASSERT_EQ(a.size(), 2u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].x, b[i].x);
        EXPECT_EQ(a[i].mask, b[i].mask);
        EXPECT_EQ(a[i].targets.targets, b[i].targets.targets);
    }
    const Batch c = make_batch(small_data().train, {0, 3}, {13, 12}, t, lc);
    EXPECT_FALSE(c[0].x == a[0].x && c[0].mask == a[0].mask);
}

TEST(Batches, TargetsShareTheCuboid) {
    TrainConfig t;
    t.objective = Objective::cvae_vwdice_tw;
    const LossConfig lc;
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const TrainSample s = make_sample(small_data().train, int(seed % 6), seed, t, lc);
        ASSERT_GE(s.targets.size(), 1u);
        EXPECT_LE(s.targets.size(), 3u);
        EXPECT_EQ(s.weights.size(), s.targets.size());
        EXPECT_EQ(s.targets.conformities[0], 1.0);
        EXPECT_TRUE(hadamard(s.x, s.mask).empty());
        for (const auto& y : s.targets.targets) {
            EXPECT_FALSE(y.empty());
            EXPECT_EQ(hadamard(y, s.mask), y);
        }
    }
}

TEST(Batches, SingleTargetForNonWeightedObjectives) {
    TrainConfig t;
    t.objective = Objective::cvae_basic;
    const TrainSample s = make_sample(small_data().train, 1, 5, t, LossConfig{});
    EXPECT_EQ(s.targets.size(), 1u);
}

TEST(EvalCases, FrozenAndCyclic) {
    const auto a = make_eval_cases(small_data().test, 5, 77);
    const auto b = make_eval_cases(small_data().test, 5, 77);
    ASSERT_EQ(a.size(), 5u);
    for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].shape, int(k % small_data().test.size()));
        EXPECT_EQ(a[k].x, b[k].x);
        EXPECT_EQ(unite(a[k].x, a[k].y), small_data().test[std::size_t(a[k].shape)]);
    }
}

TEST(Training, TinyRunIsFiniteAndReproducible) {
    for (Objective o : {Objective::vwdice, Objective::cvae_vwdice_tw}) {
        ExperimentConfig e = small_experiment();
        const TrainResult a = train_arm(small_data(), e, o, 3);
        const TrainResult b = train_arm(small_data(), e, o, 3);
        ASSERT_EQ(a.log.size(), 2u);
        for (std::size_t i = 0; i < a.log.size(); ++i) {
            const auto& r = a.log[i];
            EXPECT_TRUE(std::isfinite(r.loss));
            EXPECT_NEAR(r.lr / e.train.lr_at(r.epoch), 1.0, 1e-12);
            EXPECT_EQ(r.loss, b.log[i].loss);
            EXPECT_EQ(r.val_dsc, b.log[i].val_dsc);
            EXPECT_EQ(r.step, long(i + 1) * 2);
        }
        if (o == Objective::cvae_vwdice_tw) {
            EXPECT_GT(a.log[0].kl, 0.0);
        } else {
            EXPECT_EQ(a.log[0].kl, 0.0);
        }
        EXPECT_EQ(nn::encode_checkpoint(a.net), nn::encode_checkpoint(b.net));
        EXPECT_GE(a.best_epoch, 0);
    }
}

TEST(Training, LogCsvHasOneRowPerEpoch) {
    std::vector<TrainLogRow> rows(3);
    for (int i = 0; i < 3; ++i) rows[std::size_t(i)].epoch = i;
    std::ostringstream out;
    write_train_log_csv(out, rows);
    const std::string s = out.str();
    EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 4);
    EXPECT_EQ(s.rfind("epoch,step,lr,loss,reconstruction,kl,val_dsc,wall_seconds\n", 0), 0u);
}

TEST(Inference, ZeroCodeIsTheDefault) {
    ModelConfig m = small_experiment().model;
    m.mode = ModelMode::probabilistic;
    nn::CompletionNet<float> net(m);
    const VoxelGrid& x = small_data().train[0];
    const ProbGrid a = infer_complete(net, x);
    const ProbGrid b = infer_complete(net, x, std::vector<double>{0.0, 0.0});
    const ProbGrid c = infer_complete(net, x, std::vector<double>{2.0, -2.0});
    EXPECT_EQ(a, b);
    EXPECT_FALSE(a == c);
}

TEST(Inference, DeterministicModelIgnoresCode) {
    nn::CompletionNet<float> net(small_experiment().model);
    const VoxelGrid& x = small_data().train[0];
    EXPECT_EQ(infer_complete(net, x), infer_complete(net, x, std::vector<double>{5.0, 5.0}));
    EXPECT_THROW(sample_variations(net, x, 2, 1), ConfigMismatch);
}

TEST(Inference, BatchedPredictionMatchesSingle) {
    nn::CompletionNet<float> net(small_experiment().model);
    const auto& t = small_data().train;
    const auto all = predict(net, {&t[0], &t[1], &t[2]}, {}, 2);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(all[i], infer_complete(net, t[i]));
}

TEST(Inference, SampledVariationsAreSeeded) {
    ModelConfig m = small_experiment().model;
    m.mode = ModelMode::probabilistic;
    nn::CompletionNet<float> net(m);
    const VoxelGrid& x = small_data().train[0];
    const auto a = sample_variations(net, x, 3, 9);
    const auto b = sample_variations(net, x, 3, 9);
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a[i].z, b[i].z);
        EXPECT_EQ(a[i].completion, b[i].completion);
        EXPECT_EQ(a[i].z.size(), 2u);
    }
    EXPECT_NE(a[0].z, a[1].z);
}

TEST(Spearman, KnownValues) {
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
    // Ties get average ranks: (1, 2.5, 2.5, 4) against (1, 2, 3, 4).
    EXPECT_NEAR(spearman({1, 2, 2, 3}, {1, 2, 3, 4}), 4.5 / std::sqrt(22.5), 1e-12);
    // Monotone transforms leave it unchanged.
    EXPECT_NEAR(spearman({0.1, 5, 2, 9}, {3, 1, 2, 0}), spearman({std::exp(0.1), std::exp(5.), std::exp(2.), std::exp(9.)}, {3, 1, 2, 0}), 1e-15);
    EXPECT_THROW(spearman({1}, {1}), InvalidArgument);
}

TEST(LatentDeviation, RowsAndAnchors) {
    ModelConfig m = small_experiment().model;
    m.mode = ModelMode::probabilistic;
    nn::CompletionNet<float> net(m);
    const auto cases = make_eval_cases(small_data().test, 3, 5);
    const auto r = latent_deviation_experiment(net, cases, 4, 0.5, 21);
    ASSERT_EQ(r.rows.size(), 12u);
    for (const auto& row : r.rows) {
        EXPECT_DOUBLE_EQ(row.distance, 0.5 * row.draw);
        EXPECT_GE(row.dsc, 0.0);
        EXPECT_LE(row.dsc, 1.0);
    }
    EXPECT_GE(r.spearman_rho, -1.0);
    EXPECT_LE(r.spearman_rho, 1.0);
    std::ostringstream a, b;
    write_latent_csv(a, r);
    write_latent_csv(b, latent_deviation_experiment(net, cases, 4, 0.5, 21));
    EXPECT_EQ(a.str(), b.str());
}

TEST(Table1, CsvRowsAndThreadIndependence) {
    ExperimentConfig e = small_experiment();
    e.train.epochs = 1;
    e.seeds = {1, 2};
    const Table1Report one = table1_experiment(small_data(), e, 1);
    const Table1Report two = table1_experiment(small_data(), e, 2);
    std::ostringstream a, b;
    write_table1_csv(a, one);
    write_table1_csv(b, two);
    EXPECT_EQ(a.str(), b.str());
    const std::string s = a.str();
    EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 6);
    EXPECT_EQ(one.arms.size(), 5u);
    for (const auto& arm : one.arms) {
        EXPECT_EQ(arm.seed_mean_dsc.size(), 2u);
        EXPECT_EQ(arm.reports.size(), 2u * 4u);
    }
    EXPECT_EQ(one.arm(Objective::vwdice).arm, Objective::vwdice);
    EXPECT_THROW(Table1Report{}.arm(Objective::vwdice), InvalidArgument);
}

TEST(Validation, RegionFollowsTheObjective) {
    const auto cases = make_eval_cases(small_data().test, 2, 3);
    const EvalCase& c = cases[0];
    const ProbGrid input_only = ProbGrid::from_binary(c.x);
    const ProbGrid full = ProbGrid::from_binary(unite(c.x, c.y));
    // Regenerating the input alone scores nothing on the removed segment...
    EXPECT_EQ(target_region_dsc(input_only, c), 0.0);
    EXPECT_EQ(target_region_dsc(full, c), 1.0);
    // ...but most of the whole shape.
    EXPECT_EQ(whole_shape_dsc(full, c), 1.0);
    EXPECT_NEAR(whole_shape_dsc(input_only, c), 2.0 * double(c.x.count()) / double(2 * c.x.count() + c.y.count()), 1e-15);

    nn::CompletionNet<float> net(small_experiment().model);
    const auto whole = evaluate_cases_dsc(net, cases, Objective::dice_whole);
    const auto target = evaluate_cases_dsc(net, cases, Objective::dice_target);
    const auto preds = predict(net, {&cases[0].x, &cases[1].x});
    for (std::size_t i = 0; i < cases.size(); ++i) {
        EXPECT_EQ(whole[i], whole_shape_dsc(preds[i], cases[i]));
        EXPECT_EQ(target[i], target_region_dsc(preds[i], cases[i]));
    }
}
