#include <gtest/gtest.h>

#include "support.hpp"
#include "tbve/error.hpp"

using namespace tbve;
using ag::Matrix;
using ag::Var;

namespace {

const ToyCorpus& corpus() {
    static const ToyCorpus c = fixtures::toy(2);
    return c;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

}  // namespace

TEST(Model, EncoderShapesAndPositionSensitivity) {
    AcousticModel model(fixtures::small_config(corpus().lexicon));
    const std::vector<int> ids{1, 2, 3, 4};
    const std::vector<bool> masked(4, false);
    const auto enc = model.encode_phones(ids, masked, {}).value();
    EXPECT_EQ(enc.rows(), 4);
    EXPECT_EQ(enc.cols(), 32);
    const std::vector<int> swapped{2, 1, 3, 4};
    EXPECT_NE(model.encode_phones(swapped, masked, {}).value(), enc);
    EXPECT_EQ(model.encode_phones(std::vector<int>{5}, {false}, {}).value().rows(), 1);
    EXPECT_THROW(model.encode_phones(std::vector<int>{999}, {false}, {}), InvalidInput);
    EXPECT_THROW(model.encode_phones(std::vector<int>{}, {}, {}), InvalidInput);
}

TEST(Model, BlockCountsFollowConfig) {
    auto cfg = fixtures::small_config(corpus().lexicon);
    cfg.encoder_blocks = 4;
    cfg.coarse_blocks = 3;
    cfg.fine_blocks = 2;
    AcousticModel model(cfg);
    EXPECT_EQ(model.encoder_block_count(), 4);
    EXPECT_EQ(model.coarse_block_count(), 3);
    EXPECT_EQ(model.fine_block_count(), 2);
    std::size_t attention = 0;
    for (const auto& [name, p] : model.parameters().parameters())
        if (name.find(".attn.q.weight") != std::string::npos) ++attention;
    EXPECT_EQ(attention, 9u);
    cfg.mask_token_dim = 16;
    EXPECT_THROW(AcousticModel m(cfg), InvalidInput);
}

TEST(Model, DurationQuantization) {
    Matrix raw(4, 1);
    raw << 0.0, -5.0, std::log(3.4), std::log(0.25);
    EXPECT_EQ(quantize_durations(raw), (std::vector<int>{1, 0, 3, 0}));
    for (int d = 0; d < 50; ++d) {
        Matrix t(1, 1);
        t(0, 0) = duration_target(d);
        EXPECT_EQ(quantize_durations(t)[0], d);
    }
}

TEST(Model, VarianceIsDeterministicAtEval) {
    AcousticModel model(fixtures::small_config(corpus().lexicon));
    const std::vector<int> ids{1, 2, 3};
    const auto enc = model.encode_phones(ids, {false, true, false}, {});
    const auto a = model.predict_variance(enc, {});
    const auto b = model.predict_variance(enc, {});
    EXPECT_EQ(a.log_duration.value(), b.log_duration.value());
    EXPECT_EQ(a.log_f0.value(), b.log_f0.value());
    EXPECT_EQ(a.log_duration.rows(), 3);
}

TEST(LengthRegulator, Definition) {
    Matrix p(3, 2);
    p << 1, 2, 3, 4, 5, 6;
    const std::vector<int> d{2, 3, 1};
    const auto out = length_regulate(ag::constant(p), d).value();
    ASSERT_EQ(out.rows(), 6);
    const int src[] = {0, 0, 1, 1, 1, 2};
    for (int t = 0; t < 6; ++t) EXPECT_EQ(out.row(t), p.row(src[t]));
    EXPECT_EQ(length_regulate(ag::constant(p), std::vector<int>{1, 1, 1}).value(), p);
    EXPECT_EQ(length_regulate(ag::constant(p), std::vector<int>{0, 2, 0}).value().rows(), 2);
    EXPECT_THROW(length_regulate(ag::constant(p), std::vector<int>{0, 0, 0}), InvalidInput);
    EXPECT_THROW(length_regulate(ag::constant(p), std::vector<int>{1, 1}), InvalidInput);
}

TEST(LengthRegulator, RandomDurationsPreserveFrameBudget) {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto phones = rng.uniform_int(1, 12);
        std::vector<int> d(static_cast<std::size_t>(phones));
        int total = 0;
        for (auto& x : d) total += (x = static_cast<int>(rng.uniform_int(0, 6)));
        if (total == 0) d[0] = total = 1;
        const Matrix p = random_matrix(phones, 3, rng);
        const auto out = length_regulate(ag::constant(p), d).value();
        ASSERT_EQ(out.rows(), total);
        Eigen::Index t = 0;
        for (std::size_t i = 0; i < d.size(); ++i)
            for (int k = 0; k < d[i]; ++k, ++t) ASSERT_EQ(out.row(t), p.row(static_cast<Eigen::Index>(i)));
    }
}

TEST(DecoderInput, LayoutWidthForEveryConditioningMode) {
    for (auto e : kEmbeddingModes)
        for (auto r : kRefModes) {
            const auto cfg = fixtures::small_config(corpus().lexicon, e, r);
            const int expected = 32 + 1 + (e == EmbeddingMode::none ? 0 : 32) + (r == RefMode::none ? 0 : 32) + 19 + 32;
            EXPECT_EQ(cfg.decoder_input_dim(), expected);
            AcousticModel model(cfg);
            EXPECT_EQ(model.layout().width, expected);
        }
    EXPECT_EQ(fixtures::small_config(corpus().lexicon).decoder_input_dim(), 32 + 1 + 19 + 32);
}

TEST(DecoderInput, BroadcastAndFullMask) {
    AcousticModel model(fixtures::small_config(corpus().lexicon, EmbeddingMode::utterance, RefMode::standard));
    Rng rng(6);
    const Eigen::Index t = 7;
    const Var up = ag::constant(random_matrix(t, 32, rng));
    ConditioningInputs ci;
    ci.embedding = EmbeddingVector{};
    (*ci.embedding)[3] = 2.0f;
    ci.reference_features = random_matrix(20, 19, rng);
    const auto cond = model.condition(ci, {});
    const Matrix context = Matrix::Zero(t, 19);
    const std::vector<bool> all_masked(static_cast<std::size_t>(t), true);
    const auto in = model.assemble_decoder_input(up, Matrix::Ones(t, 1), cond, context, all_masked).value();
    const auto l = model.layout();
    for (Eigen::Index i = 1; i < t; ++i) {
        EXPECT_EQ(in.row(i).segment(l.embedding, 32), in.row(0).segment(l.embedding, 32));
        EXPECT_EQ(in.row(i).segment(l.reference, 32), in.row(0).segment(l.reference, 32));
    }
    EXPECT_EQ(in(0, l.embedding + 3), 1.0);  // unit-normalized
    const Matrix token = model.parameters().find("decoder.mask_token.table").value();
    for (Eigen::Index i = 0; i < t; ++i) {
        EXPECT_TRUE(in.row(i).segment(l.context, 19).isZero(0.0));
        EXPECT_EQ(in.row(i).segment(l.mask_token, 32), token.row(1));
    }
    EXPECT_THROW(model.assemble_decoder_input(up, Matrix::Ones(t - 1, 1), cond, context, all_masked), InvalidInput);
}

TEST(Decoder, ShapesAndFineDependsOnCoarse) {
    AcousticModel model(fixtures::small_config(corpus().lexicon));
    Rng rng(7);
    const Var in = ag::constant(random_matrix(9, model.config().decoder_input_dim(), rng));
    const auto out = model.decode(in, {});
    EXPECT_EQ(out.coarse.rows(), 9);
    EXPECT_EQ(out.coarse.cols(), 19);
    EXPECT_EQ(out.fine.rows(), 9);
    EXPECT_EQ(out.fine.cols(), 19);
    const auto zeroed = model.decode_fine(in, ag::constant(Matrix::Zero(9, 19)), {});
    EXPECT_GT((zeroed.value() - out.fine.value()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Decoder, FineOutputGradientReachesCoarsePathWeights) {
    AcousticModel model(fixtures::small_config(corpus().lexicon));
    Rng rng(8);
    const Matrix x = random_matrix(6, model.config().decoder_input_dim(), rng);
    auto fine_sum = [&] { return ag::sum(model.decode(ag::constant(x), {}).fine); };
    model.parameters().zero_grad();
    ag::backward(fine_sum());
    for (const std::string name : {"coarse.output.weight", "coarse.input.weight", "coarse.block0.ffn_in.weight"}) {
        Var w = model.parameters().find(name);
        for (Eigen::Index i : {Eigen::Index{0}, w.value().size() / 2, w.value().size() - 1}) {
            const double orig = w.value().data()[i], h = 1e-5;
            double plus, minus;
            {
                ag::NoGradGuard g;
                w.mutable_value().data()[i] = orig + h;
                plus = fine_sum().item();
                w.mutable_value().data()[i] = orig - h;
                minus = fine_sum().item();
                w.mutable_value().data()[i] = orig;
            }
            const double numeric = (plus - minus) / (2 * h);
            EXPECT_NEAR(w.grad().data()[i], numeric, 1e-3 * std::max(1e-2, std::abs(numeric))) << name << "[" << i << "]";
        }
    }
}

TEST(Model, NormalizationRoundTrip) {
    const auto set = fixtures::training_set(corpus());
    AcousticModel model(fixtures::small_config(corpus().lexicon));
    const auto feats = fixtures::features_of(set);
    model.set_normalization(feats);
    const auto& f = feats[0];
    const auto back = model.from_model(model.to_model(f));
    ASSERT_EQ(back.frames(), f.frames());
    for (std::size_t t = 0; t < f.frames(); ++t)
        for (std::size_t d = 0; d < kFeatureDim; ++d) {
            const double tol = d == kF0Col ? 1e-3 * std::max(1.0f, f.at(t, d)) : 1e-4;
            EXPECT_NEAR(back.at(t, d), f.at(t, d), tol) << t << "," << d;
        }
}

TEST(Model, ForwardFrameBudgetAndDeterminism) {
    const auto set = fixtures::training_set(corpus());
    AcousticModel model(fixtures::small_config(corpus().lexicon, EmbeddingMode::speaker, RefMode::variational));
    model.set_normalization(fixtures::features_of(set));
    const auto& ex = set.examples[0];
    const auto prep = prepare_example(model, ex, make_mask(ex.phone_ids.size(), 0.5, 1),
                                      set.embedding_for(ex, EmbeddingMode::speaker));
    ag::NoGradGuard g;
    const auto a = model.forward(prep.inputs, {});
    const auto b = model.forward(prep.inputs, {});
    EXPECT_EQ(a.decoded.fine.rows(), static_cast<Eigen::Index>(ex.features.frames()));
    EXPECT_EQ(a.decoded.fine.value(), b.decoded.fine.value());
    EXPECT_EQ(a.decoded.coarse.value(), b.decoded.coarse.value());
}

TEST(Model, ConfigJsonRoundTrip) {
    auto cfg = fixtures::small_config(corpus().lexicon, EmbeddingMode::utterance, RefMode::variational);
    cfg.encoder_mask_token = false;
    const auto back = model_config_from_json(to_json(cfg));
    EXPECT_EQ(to_json(back), to_json(cfg));
    auto j = to_json(cfg);
    j["bogus"] = 1;
    EXPECT_THROW(model_config_from_json(j), InvalidInput);
}
