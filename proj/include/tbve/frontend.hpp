#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "tbve/features.hpp"

namespace tbve {

using PhoneId = int;

// Word -> phone string mapping plus the phone inventory it induces.
// Inventory slot 0 is always the silence phone "SIL"; other phones are
// sorted by name so ids do not depend on lexicon line order.
class Lexicon {
public:
    static constexpr PhoneId kSilence = 0;
    static constexpr std::string_view kSilenceName = "SIL";

    Lexicon();

    // "WORD PH1 PH2 ..." per line; blank lines and lines starting with
    // '#' or ";;;" are skipped. Words are stored uppercased.
    static Lexicon parse(std::string_view text);
    static Lexicon load(const std::filesystem::path& path);

    void add(std::string_view word, const std::vector<std::string>& phones);

    const std::vector<std::string>& inventory() const { return inventory_; }
    std::size_t inventory_size() const { return inventory_.size(); }
    PhoneId id(std::string_view phone) const;  // throws InvalidInput
    const std::string& name(PhoneId id) const;
    bool contains(std::string_view upper_word) const { return entries_.contains(std::string(upper_word)); }
    // Phone names for an uppercase word; throws OovError.
    const std::vector<std::string>& pronounce(std::string_view upper_word) const;

private:
    void rebuild_inventory();

    std::map<std::string, std::vector<std::string>> entries_;
    std::vector<std::string> inventory_;
    std::map<std::string, PhoneId, std::less<>> ids_;
};

// Phone-rate linguistic input. Punctuation runs become their own tokens
// that map to a single silence phone.
struct PhoneSequence {
    std::vector<PhoneId> phones;
    std::vector<std::size_t> word_index;  // non-decreasing
    std::vector<bool> is_word_boundary;   // true on each token's first phone
    std::vector<std::string> words;       // token text (uppercased words / punctuation)

    std::size_t size() const { return phones.size(); }
    bool empty() const { return phones.empty(); }
    std::size_t word_count() const { return words.size(); }

    // [first, last) phone indices of token w.
    std::pair<std::size_t, std::size_t> phones_of_word(std::size_t w) const;

    bool operator==(const PhoneSequence&) const = default;
};

// Splits on whitespace and separates punctuation runs into tokens; words are
// uppercased. Apostrophes and hyphens inside a word stay part of it.
std::vector<std::string> tokenize(std::string_view text);
bool is_punctuation_token(std::string_view token);

PhoneSequence text_to_phones(std::string_view text, const Lexicon& lexicon);

// Concatenation with word indices of `b` shifted past `a`.
PhoneSequence concat(const PhoneSequence& a, const PhoneSequence& b);

struct WordAlignment {
    std::vector<FrameRange> spans;        // one per token
    std::vector<int> phone_durations;     // frames per phone

    std::size_t total_frames() const;
    // [start, end) frames covered by phones [first, last).
    FrameRange frames_of_phones(std::size_t first, std::size_t last) const;
};

// One line of the corpus manifest (JSON object per line).
struct ManifestRecord {
    std::string id;
    std::string audio_path;
    std::string text;
    std::vector<std::string> phones;
    std::vector<int> durations_frames;
    std::string speaker_id;
};

ManifestRecord manifest_record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ManifestRecord& r);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

// Validates the record against the text-derived phone sequence and the
// extracted features, then derives word spans from phone durations.
WordAlignment ingest_alignment(const ManifestRecord& record, const VocoderFeatures& features,
                               const PhoneSequence& phones, const Lexicon& lexicon);
WordAlignment ingest_alignment(const std::vector<int>& durations, std::size_t frames,
                               const PhoneSequence& phones);

// Even split of `frames` over the phones (durations differ by at most 1).
WordAlignment uniform_fallback_alignment(const PhoneSequence& phones, std::size_t frames);

}  // namespace tbve
