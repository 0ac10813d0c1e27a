#pragma once

#include "tbve/corpus.hpp"
#include "tbve/model.hpp"
#include "tbve/training.hpp"

namespace tbve::fixtures {

inline ModelConfig small_config(const Lexicon& lexicon, EmbeddingMode e = EmbeddingMode::none,
                                RefMode r = RefMode::none, int blocks = 1) {
    ModelConfig c;
    c.encoder_blocks = c.coarse_blocks = c.fine_blocks = blocks;
    c.hidden = 32;
    c.heads = 2;
    c.ffn_dim = 64;
    c.variance_hidden = 32;
    c.dropout = 0.0;
    c.embedding_mode = e;
    c.ref_mode = r;
    c.phone_inventory = lexicon.inventory();
    c.init_seed = 17;
    return c;
}

inline ToyCorpus toy(std::size_t utterances = 4, std::uint64_t seed = 3) {
    ToyCorpusOptions o;
    o.utterances = utterances;
    o.seed = seed;
    return make_toy_corpus(o);
}

inline TrainingSet training_set(const ToyCorpus& corpus) {
    const StatisticsEmbeddingProvider provider;
    TrainingSet set;
    for (const auto& u : corpus.utterances) {
        const auto e = prepare_entry(u.record, u.audio, corpus.lexicon, provider);
        set.examples.push_back({u.record.id, u.record.speaker_id, e.phones.phones, e.alignment.phone_durations,
                                e.features, e.embedding});
    }
    set.compute_speaker_embeddings();
    return set;
}

inline Corpus corpus_of(const ToyCorpus& toy) {
    const StatisticsEmbeddingProvider provider;
    Corpus c(toy.lexicon);
    for (const auto& u : toy.utterances) c.add(prepare_entry(u.record, u.audio, toy.lexicon, provider));
    return c;
}

inline std::vector<VocoderFeatures> features_of(const TrainingSet& set) {
    std::vector<VocoderFeatures> out;
    for (const auto& ex : set.examples) out.push_back(ex.features);
    return out;
}

}  // namespace tbve::fixtures
