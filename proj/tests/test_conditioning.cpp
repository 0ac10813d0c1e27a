#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "tbve/conditioning.hpp"
#include "tbve/error.hpp"

using namespace tbve;
using ag::Matrix;

namespace {

// Harmonic "voice": f0 with harmonics rolling off as 1/k^tilt, light noise.
AudioClip voice(double f0, double tilt, std::uint64_t seed, double seconds = 0.6) {
    Rng rng(seed);
    AudioClip clip;
    const auto n = static_cast<std::size_t>(seconds * clip.sample_rate);
    clip.samples.resize(n);
    const double jitter = 1.0 + 0.01 * rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (int k = 1; k * f0 < 7000; ++k)
            v += std::sin(2 * std::numbers::pi * k * f0 * jitter * i / clip.sample_rate) / std::pow(k, tilt);
        clip.samples[i] = static_cast<float>(0.2 * v + 0.002 * rng.normal());
    }
    return clip;
}

UtteranceEmbedding unit(std::size_t i, float v = 1.0f) {
    UtteranceEmbedding e;
    e.vector[i] = v;
    return e;
}

}  // namespace

TEST(Embedding, DeterministicAndFinite) {
    const auto f = extract_features(voice(140, 1.0, 1), FrameSpec{});
    const StatisticsEmbeddingProvider p;
    const auto a = embed_utterance(f, p), b = embed_utterance(f, p);
    EXPECT_EQ(a, b);
    for (float v : a.vector) EXPECT_TRUE(std::isfinite(v));
}

TEST(Embedding, ZeroFeaturesMapToZeroStatistics) {
    // Silence has all-zero features, so every statistic is 0 and the linear
    // projection of the zero vector is the zero embedding.
    const VocoderFeatures zeros(10);
    const auto stats = StatisticsEmbeddingProvider::statistics(zeros);
    for (double s : stats) EXPECT_EQ(s, 0.0);
    const auto e = embed_utterance(zeros, StatisticsEmbeddingProvider());
    for (float v : e.vector) EXPECT_EQ(v, 0.0f);
}

TEST(Embedding, ProjectionPreservesStatisticGeometry) {
    const auto f = extract_features(voice(140, 1.0, 1), FrameSpec{});
    const auto stats = StatisticsEmbeddingProvider::statistics(f);
    const auto e = StatisticsEmbeddingProvider().embed(f);
    double ns = 0, ne = 0;
    for (double s : stats) ns += s * s;
    for (float v : e) ne += double(v) * v;
    EXPECT_NEAR(std::sqrt(ne), std::sqrt(ns), 1e-4 * std::sqrt(ns));
}

TEST(Embedding, SameSpeakerIsCloserThanShiftedPitch) {
    const StatisticsEmbeddingProvider p;
    const FrameSpec spec;
    const auto a1 = embed_utterance(extract_features(voice(120, 1.2, 1), spec), p);
    const auto a2 = embed_utterance(extract_features(voice(120, 1.2, 2), spec), p);
    const auto b = embed_utterance(extract_features(voice(240, 1.2, 3), spec), p);
    const double same = cosine_similarity(a1.vector, a2.vector);
    const double other = cosine_similarity(a1.vector, b.vector);
    EXPECT_GT(same, other);
}

TEST(Embedding, EmptyInputRejected) {
    EXPECT_THROW(embed_utterance(VocoderFeatures(0), StatisticsEmbeddingProvider()), InvalidInput);
}

TEST(Embedding, SubprocessProviderFollowsWireContract) {
    const auto f = extract_features(voice(180, 1.0, 4), FrameSpec{});
    const SubprocessEmbeddingProvider external(TBVE_EMBEDDER_STUB);
    EXPECT_EQ(embed_utterance(f, external).vector, StatisticsEmbeddingProvider().embed(f));
}

TEST(Embedding, SubprocessFailuresAreProviderErrors) {
    const VocoderFeatures f(3);
    EXPECT_THROW(embed_utterance(f, SubprocessEmbeddingProvider("false")), ProviderError);
    EXPECT_THROW(embed_utterance(f, SubprocessEmbeddingProvider("printf abc;")), ProviderError);
    EXPECT_THROW(embed_utterance(f, SubprocessEmbeddingProvider("/nonexistent/embedder")), ProviderError);
}

TEST(Embedding, CacheRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "tbve_cache_test.jsonl";
    EmbeddingCache cache;
    cache["b"] = unit(3, 0.1f).vector;
    cache["a"] = unit(0, -2.5e-7f).vector;
    write_embedding_cache(path, cache);
    EXPECT_EQ(read_embedding_cache(path), cache);
    std::filesystem::remove(path);
}

TEST(SpeakerEmbedding, MeanCases) {
    const auto e = unit(5, 0.25f);
    const std::vector<UtteranceEmbedding> one{e}, two{e, e};
    EXPECT_EQ(speaker_embedding(one).vector, e.vector);
    EXPECT_EQ(speaker_embedding(two).vector, e.vector);
    const std::vector<UtteranceEmbedding> basis{unit(0), unit(1)};
    const auto m = speaker_embedding(basis);
    EXPECT_EQ(m.vector[0], 0.5f);
    EXPECT_EQ(m.vector[1], 0.5f);
    for (std::size_t i = 2; i < kEmbeddingDim; ++i) EXPECT_EQ(m.vector[i], 0.0f);
    EXPECT_THROW(speaker_embedding({}), InvalidInput);
}

TEST(SpeakerEmbedding, PermutationInvariantArithmeticMean) {
    Rng rng(21);
    std::vector<UtteranceEmbedding> utts(7);
    for (auto& u : utts)
        for (auto& v : u.vector) v = static_cast<float>(rng.normal());
    const auto base = speaker_embedding(utts);
    for (std::size_t d = 0; d < kEmbeddingDim; ++d) {
        double sum = 0;
        for (const auto& u : utts) sum += u.vector[d];
        EXPECT_NEAR(base.vector[d], sum / utts.size(), 1e-6);
    }
    for (int trial = 0; trial < 20; ++trial) {
        std::shuffle(utts.begin(), utts.end(), rng.engine());
        EXPECT_EQ(speaker_embedding(utts).vector, base.vector);
    }
}

TEST(Conditioning, ModeParsingAndBundleInvariants) {
    for (auto m : kEmbeddingModes) EXPECT_EQ(parse_embedding_mode(to_string(m)), m);
    for (auto m : kRefModes) EXPECT_EQ(parse_ref_mode(to_string(m)), m);
    EXPECT_THROW(parse_embedding_mode("both"), InvalidInput);
    ConditioningBundle b{EmbeddingMode::utterance, RefMode::none, std::nullopt, std::nullopt};
    EXPECT_THROW(b.validate(), InvalidInput);
    b.embedding = EmbeddingVector{};
    EXPECT_NO_THROW(b.validate());
    b.ref_mode = RefMode::standard;
    EXPECT_THROW(b.validate(), InvalidInput);
}

TEST(ReferenceEncoder, InternalLengths) {
    const auto l = ReferenceEncoder::internal_lengths(100);
    EXPECT_EQ(l[0], 50);
    EXPECT_EQ(l[1], 25);
    EXPECT_EQ(l[2], 13);
    for (Eigen::Index t = 1; t <= 300; ++t) {
        Eigen::Index len = t;
        for (auto got : ReferenceEncoder::internal_lengths(t)) {
            len = (len - 1) / 2 + 1;
            EXPECT_EQ(got, len);
        }
    }
}

TEST(ReferenceEncoder, OutputIs32DimForAnyLengthAndMode) {
    Rng init(1), rng(2);
    for (auto mode : {RefMode::standard, RefMode::variational}) {
        nn::ParameterStore store;
        ReferenceEncoder enc(store, "ref", mode, static_cast<int>(kFeatureDim), init);
        for (Eigen::Index t : {1, 2, 200}) {
            Matrix x(t, kFeatureDim);
            for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
            for (bool training : {false, true}) {
                const auto out = enc.forward(ag::constant(x), {.training = training, .rng = &rng});
                EXPECT_EQ(out.encoding.rows(), 1);
                EXPECT_EQ(out.encoding.cols(), static_cast<Eigen::Index>(kEmbeddingDim));
                EXPECT_GE(out.kl.item(), 0.0);
                if (mode == RefMode::standard) EXPECT_EQ(out.kl.item(), 0.0);
            }
        }
    }
    nn::ParameterStore store;
    EXPECT_THROW(ReferenceEncoder(store, "ref", RefMode::none, 19, init), InvalidInput);
}

TEST(ReferenceEncoder, VariationalEvalIsDeterministicTrainingSamples) {
    Rng init(3), rng(4);
    nn::ParameterStore store;
    ReferenceEncoder enc(store, "ref", RefMode::variational, static_cast<int>(kFeatureDim), init);
    Matrix x(40, kFeatureDim);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    const auto a = enc.forward(ag::constant(x), {}).encoding.value();
    const auto b = enc.forward(ag::constant(x), {}).encoding.value();
    EXPECT_EQ(a, b);
    const auto s1 = enc.forward(ag::constant(x), {.training = true, .rng = &rng}).encoding.value();
    const auto s2 = enc.forward(ag::constant(x), {.training = true, .rng = &rng}).encoding.value();
    EXPECT_NE(s1, s2);
}

TEST(ReferenceEncoder, KlClosedFormAndGradient) {
    // Hand-rolled KL(N(mu, sigma^2) || N(0, 1)) summed over dimensions.
    Rng rng(5);
    Matrix mu(1, kEmbeddingDim), logvar(1, kEmbeddingDim);
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        mu(0, i) = rng.normal();
        logvar(0, i) = 0.5 * rng.normal();
    }
    double expected = 0;
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        const double s2 = std::exp(logvar(0, i));
        expected += 0.5 * (mu(0, i) * mu(0, i) + s2 - std::log(s2) - 1.0);
    }
    const auto m = ag::leaf(mu);
    const auto kl = ag::kl_standard_normal(m, ag::constant(logvar));
    EXPECT_NEAR(kl.item(), expected, 1e-6);
    ag::backward(kl);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        Matrix p = mu, q = mu;
        p(0, i) += h;
        q(0, i) -= h;
        ag::NoGradGuard g;
        const double numeric = (ag::kl_standard_normal(ag::constant(p), ag::constant(logvar)).item() -
                                ag::kl_standard_normal(ag::constant(q), ag::constant(logvar)).item()) /
                               (2 * h);
        EXPECT_NEAR(m.grad()(0, i), numeric, 1e-3 * std::max(1e-3, std::abs(numeric)));
    }
    const Matrix zero = Matrix::Zero(1, kEmbeddingDim);
    EXPECT_EQ(ag::kl_standard_normal(ag::constant(zero), ag::constant(zero)).item(), 0.0);
}
