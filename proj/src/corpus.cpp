#include "tbve/corpus.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tbve/error.hpp"
#include "tbve/io.hpp"
#include "tbve/model.hpp"

namespace tbve {

namespace fs = std::filesystem;

const CorpusEntry& Corpus::at(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw InvalidInput("unknown utterance '" + id + "'");
    return it->second;
}

void Corpus::add(CorpusEntry entry) {
    const auto id = entry.record.id;
    entries_[id] = std::move(entry);
}

SpeakerEmbedding Corpus::speaker_embedding(const std::string& speaker_id) const {
    std::vector<UtteranceEmbedding> utts;
    for (const auto& [id, e] : entries_)
        if (e.record.speaker_id == speaker_id) utts.push_back({e.embedding});
    if (utts.empty()) throw InvalidInput("no utterances for speaker '" + speaker_id + "'");
    return tbve::speaker_embedding(utts);
}

TrainingSet make_training_set(const Corpus& corpus) {
    TrainingSet set;
    for (const auto& [id, e] : corpus.entries())
        set.examples.push_back({id, e.record.speaker_id, e.phones.phones, e.alignment.phone_durations, e.features,
                                e.embedding});
    set.compute_speaker_embeddings();
    return set;
}

CorpusEntry prepare_entry(const ManifestRecord& record, const AudioClip& audio, const Lexicon& lexicon,
                          const EmbeddingProvider& provider, const FrameSpec& spec) {
    CorpusEntry e;
    e.record = record;
    e.features = extract_features(audio, spec);
    e.phones = text_to_phones(record.text, lexicon);
    e.alignment = ingest_alignment(record, e.features, e.phones, lexicon);
    e.embedding = embed_utterance(e.features, provider).vector;
    e.audio_sha256 = io::sha256_hex(encode_wav(audio));
    return e;
}

namespace {

struct PreparedLine {
    ManifestRecord record;
    std::string audio_sha256;
    std::string manifest_hash;
};

std::string manifest_hash(const ManifestRecord& r) {
    const auto text = to_json(r).dump();
    return std::to_string(io::fnv1a64({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}));
}

std::map<std::string, PreparedLine> read_prepared(const fs::path& path) {
    std::map<std::string, PreparedLine> out;
    std::ifstream in(path);
    std::string line;
    while (in && std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        PreparedLine p{manifest_record_from_json(j.at("record")), j.at("audio_sha256").get<std::string>(),
                       j.value("manifest_hash", std::string())};
        out[p.record.id] = std::move(p);
    }
    return out;
}

}  // namespace

PrepareReport prepare_corpus(const fs::path& manifest, const fs::path& lexicon_path, const fs::path& out_dir,
                             const EmbeddingProvider& provider) {
    const auto lexicon_text = std::string(
        [&] { auto b = io::read_file(lexicon_path); return std::string(b.begin(), b.end()); }());
    const auto lexicon = Lexicon::parse(lexicon_text);
    const auto records = read_manifest(manifest);
    fs::create_directories(out_dir / "features");
    fs::create_directories(out_dir / "audio");
    const auto previous = read_prepared(out_dir / "prepared.jsonl");
    const auto previous_cache =
        fs::exists(out_dir / "embeddings.jsonl") ? read_embedding_cache(out_dir / "embeddings.jsonl") : EmbeddingCache{};

    PrepareReport report;
    std::string prepared_text;
    EmbeddingCache cache;
    std::set<std::string> speakers, seen;
    for (const auto& record : records) {
        try {
            if (!seen.insert(record.id).second) throw InvalidInput("duplicate record id");
            const fs::path audio_path = manifest.parent_path() / record.audio_path;
            const auto wav = io::read_file(audio_path);
            const auto sha = io::sha256_hex(wav);
            const auto mhash = manifest_hash(record);
            const fs::path feature_file = out_dir / "features" / (record.id + ".tbvf");
            const fs::path audio_copy = out_dir / "audio" / (record.id + ".wav");
            std::size_t frames = 0;
            auto prev = previous.find(record.id);
            if (prev != previous.end() && prev->second.audio_sha256 == sha && prev->second.manifest_hash == mhash &&
                fs::exists(feature_file) && fs::exists(audio_copy) && previous_cache.contains(record.id)) {
                frames = read_tbvf(feature_file).frames();
                cache[record.id] = previous_cache.at(record.id);
                ++report.skipped_unchanged;
            } else {
                const auto entry = prepare_entry(record, decode_wav(wav), lexicon, provider);
                write_tbvf(feature_file, entry.features);
                io::write_file_atomic(audio_copy, wav);
                cache[record.id] = entry.embedding;
                frames = entry.features.frames();
            }
            nlohmann::json line{{"record", to_json(record)}, {"audio_sha256", sha}, {"manifest_hash", mhash},
                                {"frames", frames}};
            prepared_text += line.dump() + "\n";
            speakers.insert(record.speaker_id);
            report.total_frames += frames;
            ++report.utterances;
        } catch (const std::exception& e) {
            report.failures.emplace_back(record.id, e.what());
        }
    }
    report.speakers = speakers.size();
    io::write_text_atomic(out_dir / "lexicon.txt", lexicon_text);
    io::write_text_atomic(out_dir / "prepared.jsonl", prepared_text);
    write_embedding_cache(out_dir / "embeddings.jsonl", cache);
    return report;
}

Corpus Corpus::load(const fs::path& data_dir) {
    if (!fs::exists(data_dir / "prepared.jsonl"))
        throw InvalidInput("no prepared corpus in " + data_dir.string() + " (run prepare-data first)");
    Corpus corpus(Lexicon::load(data_dir / "lexicon.txt"));
    const auto cache = read_embedding_cache(data_dir / "embeddings.jsonl");
    for (const auto& [id, line] : read_prepared(data_dir / "prepared.jsonl")) {
        CorpusEntry e;
        e.record = line.record;
        e.record.audio_path = (data_dir / "audio" / (id + ".wav")).string();
        e.audio_sha256 = line.audio_sha256;
        e.features = read_tbvf(data_dir / "features" / (id + ".tbvf"));
        e.phones = text_to_phones(e.record.text, corpus.lexicon());
        e.alignment = ingest_alignment(e.record.durations_frames, e.features.frames(), e.phones);
        auto it = cache.find(id);
        if (it == cache.end()) throw InvalidInput("no cached embedding for " + id);
        e.embedding = it->second;
        corpus.add(std::move(e));
    }
    return corpus;
}

namespace {

enum class Source { silence, voiced, noise, burst };

struct PhoneSound {
    Source source;
    double f1, f2;      // formants (voiced) or band centre / width (noise)
    double amplitude;
};

const std::map<std::string, PhoneSound, std::less<>>& phone_sounds() {
    static const std::map<std::string, PhoneSound, std::less<>> table{
        {"SIL", {Source::silence, 0, 0, 0}},
        {"AA", {Source::voiced, 730, 1090, 0.30}},  {"AE", {Source::voiced, 660, 1720, 0.30}},
        {"EH", {Source::voiced, 530, 1840, 0.28}},  {"IY", {Source::voiced, 270, 2290, 0.26}},
        {"OW", {Source::voiced, 570, 840, 0.30}},   {"UW", {Source::voiced, 300, 870, 0.26}},
        {"M", {Source::voiced, 250, 1200, 0.12}},   {"N", {Source::voiced, 250, 1700, 0.12}},
        {"L", {Source::voiced, 360, 1300, 0.16}},   {"R", {Source::voiced, 310, 1060, 0.16}},
        {"S", {Source::noise, 6000, 1500, 0.10}},   {"SH", {Source::noise, 3000, 1000, 0.10}},
        {"F", {Source::noise, 4500, 3000, 0.05}},   {"T", {Source::burst, 3500, 2000, 0.12}},
        {"K", {Source::burst, 2000, 1200, 0.12}},
    };
    return table;
}

const char* kToyLexicon = R"(# toy lexicon
MEAN M IY N
SEEN S IY N
FOAM F OW M
LOW L OW
ROW R OW
NEAT N IY T
SEAT S IY T
KNEE N IY
SAW S AA
MALL M AA L
TALL T AA L
CALM K AA M
SHOE SH UW
MOON M UW N
NOON N UW N
FEEL F IY L
REAL R IY L
TEN T EH N
MEN M EH N
SELL S EH L
CAT K AE T
MAT M AE T
SAT S AE T
FAN F AE N
)";

// Two-pole resonator (constant peak gain band-pass).
struct Resonator {
    double b0 = 0, a1 = 0, a2 = 0, y1 = 0, y2 = 0, x1 = 0, x2 = 0;
    Resonator(double centre, double bandwidth, int sr) {
        const double w = 2 * std::numbers::pi * centre / sr;
        const double q = std::max(centre / bandwidth, 0.3);
        const double alpha = std::sin(w) / (2 * q);
        const double a0 = 1 + alpha;
        b0 = alpha / a0;
        a1 = -2 * std::cos(w) / a0;
        a2 = (1 - alpha) / a0;
    }
    double operator()(double x) {
        const double y = b0 * x - b0 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        return y;
    }
};

}  // namespace

AudioClip render_toy_speech(const Lexicon& lexicon, std::span<const PhoneId> phones, std::span<const int> durations,
                            double f0_hz, std::uint64_t seed, const FrameSpec& spec) {
    if (phones.size() != durations.size()) throw InvalidInput("one duration per phone required");
    const auto frame_phone = frame_to_phone(durations);
    if (frame_phone.empty()) throw InvalidInput("empty frame sequence");
    const std::size_t frames = frame_phone.size();
    const std::size_t n = (frames - 1) * static_cast<std::size_t>(spec.hop) + static_cast<std::size_t>(spec.window);
    AudioClip clip;
    clip.sample_rate = spec.sample_rate;
    clip.samples.assign(n, 0.0f);
    const double sr = spec.sample_rate;
    // Vocal-tract scale: higher-pitched toy speakers get higher formants.
    const double formant_scale = 1.0 + 0.15 * std::clamp((f0_hz - 120.0) / 100.0, 0.0, 1.0);

    std::vector<double> harmonic_phase(64, 0.0);
    std::map<PhoneId, Resonator> noise_filters;
    std::size_t phone_start_sample = 0;
    int current = -1;
    for (std::size_t i = 0; i < n; ++i) {
        const double centre = (static_cast<double>(i) - spec.window / 2.0) / spec.hop;
        const auto frame = static_cast<std::size_t>(std::clamp(std::round(centre), 0.0, double(frames - 1)));
        const int p = frame_phone[frame];
        if (p != current) {
            current = p;
            phone_start_sample = i;
        }
        const auto& sound = phone_sounds().at(lexicon.name(phones[static_cast<std::size_t>(p)]));
        const double t = i / sr;
        double v = 0.0;
        if (sound.source == Source::voiced) {
            const double f0 = f0_hz * (1.0 + 0.06 * std::sin(2 * std::numbers::pi * 1.3 * t)) * (1.0 - 0.05 * t);
            const double f1 = sound.f1 * formant_scale, f2 = sound.f2 * formant_scale;
            for (std::size_t k = 1; k < harmonic_phase.size() && k * f0 < 5000.0; ++k) {
                harmonic_phase[k] += 2 * std::numbers::pi * k * f0 / sr;
                if (harmonic_phase[k] > 2 * std::numbers::pi) harmonic_phase[k] -= 2 * std::numbers::pi;
                const double h = k * f0;
                const double gain = std::exp(-std::pow((h - f1) / 120.0, 2)) +
                                    0.6 * std::exp(-std::pow((h - f2) / 180.0, 2)) + 0.05 / k;
                v += gain * std::sin(harmonic_phase[k]);
            }
            v *= sound.amplitude;
        } else if (sound.source != Source::silence) {
            auto it = noise_filters.find(phones[static_cast<std::size_t>(p)]);
            if (it == noise_filters.end())
                it = noise_filters.emplace(phones[static_cast<std::size_t>(p)],
                                           Resonator(sound.f1, sound.f2, spec.sample_rate)).first;
            double env = 1.0;
            if (sound.source == Source::burst)
                env = std::exp(-static_cast<double>(i - phone_start_sample) / (0.015 * sr));
            v = sound.amplitude * env * 4.0 * it->second(hashed_normal(seed, i));
        }
        clip.samples[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
    return clip;
}

ToyCorpus make_toy_corpus(const ToyCorpusOptions& options) {
    if (options.speakers < 1 || options.utterances < 1 || options.min_words < 1 ||
        options.min_words > options.max_words)
        throw InvalidInput("bad toy corpus options");
    ToyCorpus corpus;
    corpus.lexicon_text = kToyLexicon;
    corpus.lexicon = Lexicon::parse(corpus.lexicon_text);
    std::vector<std::string> vocabulary;
    std::istringstream lines(corpus.lexicon_text);
    for (std::string line; std::getline(lines, line);)
        if (!line.empty() && line[0] != '#') vocabulary.push_back(line.substr(0, line.find(' ')));
    Rng rng(options.seed);
    for (std::size_t u = 0; u < options.utterances; ++u) {
        const std::size_t speaker = u % options.speakers;
        const double f0 = 105.0 + 110.0 * static_cast<double>(speaker % 2) + 12.0 * static_cast<double>(speaker / 2);
        const auto words = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(options.min_words), static_cast<std::int64_t>(options.max_words)));
        std::string text;
        for (std::size_t w = 0; w < words; ++w) {
            if (w) text += (w == words / 2 && rng.uniform() < 0.3) ? ", " : " ";
            std::string word = vocabulary[static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(vocabulary.size() - 1)))];
            for (std::size_t c = 1; c < word.size(); ++c) word[c] = static_cast<char>(std::tolower(word[c]));
            text += word;
        }
        text += ".";
        const auto phones = text_to_phones(text, corpus.lexicon);
        std::vector<int> durations;
        std::vector<std::string> names;
        for (PhoneId id : phones.phones) {
            const auto& name = corpus.lexicon.name(id);
            const auto source = phone_sounds().at(name).source;
            const bool vowel = source == Source::voiced && phone_sounds().at(name).amplitude > 0.2;
            durations.push_back(static_cast<int>(vowel ? rng.uniform_int(6, 10) : rng.uniform_int(3, 6)));
            names.push_back(name);
        }
        ToyUtterance utt;
        char id[64];
        std::snprintf(id, sizeof id, "spk%zu_utt%03zu", speaker, u);
        utt.record = {id, std::string("wav/") + id + ".wav", text, names, durations, "spk" + std::to_string(speaker)};
        utt.audio = render_toy_speech(corpus.lexicon, phones.phones, durations, f0, options.seed * 7919 + u);
        corpus.utterances.push_back(std::move(utt));
    }
    return corpus;
}

void write_toy_corpus(const ToyCorpus& corpus, const fs::path& dir) {
    fs::create_directories(dir / "wav");
    io::write_text_atomic(dir / "lexicon.txt", corpus.lexicon_text);
    std::string manifest;
    for (const auto& u : corpus.utterances) {
        write_wav(dir / u.record.audio_path, u.audio);
        manifest += to_json(u.record).dump() + "\n";
    }
    io::write_text_atomic(dir / "manifest.jsonl", manifest);
}

}  // namespace tbve
