#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tbve/audio.hpp"
#include "tbve/conditioning.hpp"
#include "tbve/features.hpp"
#include "tbve/frontend.hpp"
#include "tbve/training.hpp"

namespace tbve {

// One prepared utterance: validated alignment, extracted features and its
// utterance embedding.
struct CorpusEntry {
    ManifestRecord record;
    PhoneSequence phones;
    WordAlignment alignment;
    VocoderFeatures features;
    EmbeddingVector embedding{};
    std::string audio_sha256;
};

// Prepared data directory:
//   lexicon.txt, prepared.jsonl (one record per utterance), features/<id>.tbvf,
//   embeddings.jsonl (cache), audio/<id>.wav (optional copies)
class Corpus {
public:
    Corpus() = default;
    explicit Corpus(Lexicon lexicon) : lexicon_(std::move(lexicon)) {}

    static Corpus load(const std::filesystem::path& data_dir);

    const Lexicon& lexicon() const { return lexicon_; }
    const std::map<std::string, CorpusEntry>& entries() const { return entries_; }
    const CorpusEntry& at(const std::string& id) const;  // throws InvalidInput
    bool contains(const std::string& id) const { return entries_.contains(id); }
    void add(CorpusEntry entry);

    // Mean utterance embedding over all utterances of `speaker_id`.
    SpeakerEmbedding speaker_embedding(const std::string& speaker_id) const;

private:
    Lexicon lexicon_;
    std::map<std::string, CorpusEntry> entries_;
};

// Every entry as a training example, with per-speaker mean embeddings.
TrainingSet make_training_set(const Corpus& corpus);

// Builds a corpus entry from a manifest record and its audio.
CorpusEntry prepare_entry(const ManifestRecord& record, const AudioClip& audio, const Lexicon& lexicon,
                          const EmbeddingProvider& provider, const FrameSpec& spec = {});

struct PrepareReport {
    std::size_t utterances = 0;
    std::size_t speakers = 0;
    std::size_t total_frames = 0;
    std::size_t skipped_unchanged = 0;
    std::vector<std::pair<std::string, std::string>> failures;  // (record id, error)
};

// Reads manifest + audio (paths relative to the manifest), writes the
// prepared directory. Records whose audio hash and manifest line are
// unchanged since the previous run are not recomputed.
PrepareReport prepare_corpus(const std::filesystem::path& manifest, const std::filesystem::path& lexicon,
                             const std::filesystem::path& out_dir, const EmbeddingProvider& provider);

// Synthetic multi-speaker corpus with exact phone alignments by
// construction; stands in for a public corpus where none is available.
struct ToyUtterance {
    ManifestRecord record;
    AudioClip audio;
};

struct ToyCorpus {
    std::string lexicon_text;
    Lexicon lexicon;
    std::vector<ToyUtterance> utterances;
};

struct ToyCorpusOptions {
    std::size_t utterances = 6;
    std::size_t speakers = 2;
    std::size_t min_words = 2;
    std::size_t max_words = 4;
    std::uint64_t seed = 0;
};

ToyCorpus make_toy_corpus(const ToyCorpusOptions& options);
// Renders phones with the given frame durations for a speaker with base f0
// `f0_hz`; the audio yields exactly sum(durations) analysis frames.
AudioClip render_toy_speech(const Lexicon& lexicon, std::span<const PhoneId> phones,
                            std::span<const int> durations, double f0_hz, std::uint64_t seed,
                            const FrameSpec& spec = {});
// Writes <dir>/lexicon.txt, <dir>/manifest.jsonl and <dir>/wav/<id>.wav.
void write_toy_corpus(const ToyCorpus& corpus, const std::filesystem::path& dir);

}  // namespace tbve
