#include "tbve/frontend.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "tbve/error.hpp"

namespace tbve {

namespace {

std::string upper(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

bool is_punct_char(char c) {
    const auto u = static_cast<unsigned char>(c);
    return u < 0x80 && std::ispunct(u);
}

std::vector<std::string> split_ws(std::string_view s) {
    std::vector<std::string> out;
    std::istringstream is{std::string(s)};
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

}  // namespace

Lexicon::Lexicon() { rebuild_inventory(); }

Lexicon Lexicon::parse(std::string_view text) {
    Lexicon lex;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        auto fields = split_ws(line);
        if (fields.empty() || fields[0].starts_with('#') || fields[0].starts_with(";;;")) continue;
        if (fields.size() < 2)
            throw InvalidInput("lexicon line " + std::to_string(line_no) + " has no phones");
        const std::string word = fields[0];
        fields.erase(fields.begin());
        lex.entries_[upper(word)] = std::move(fields);
    }
    lex.rebuild_inventory();
    return lex;
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open lexicon " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void Lexicon::add(std::string_view word, const std::vector<std::string>& phones) {
    if (phones.empty()) throw InvalidInput("lexicon entry needs at least one phone");
    entries_[upper(word)] = phones;
    rebuild_inventory();
}

void Lexicon::rebuild_inventory() {
    std::set<std::string> names;
    for (const auto& [word, phones] : entries_)
        for (const auto& p : phones)
            if (p != kSilenceName) names.insert(p);
    inventory_.assign(1, std::string(kSilenceName));
    inventory_.insert(inventory_.end(), names.begin(), names.end());
    ids_.clear();
    for (std::size_t i = 0; i < inventory_.size(); ++i) ids_[inventory_[i]] = static_cast<PhoneId>(i);
}

PhoneId Lexicon::id(std::string_view phone) const {
    auto it = ids_.find(phone);
    if (it == ids_.end()) throw InvalidInput("phone not in inventory: " + std::string(phone));
    return it->second;
}

const std::string& Lexicon::name(PhoneId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= inventory_.size())
        throw InvalidInput("phone id out of range: " + std::to_string(id));
    return inventory_[static_cast<std::size_t>(id)];
}

const std::vector<std::string>& Lexicon::pronounce(std::string_view upper_word) const {
    auto it = entries_.find(std::string(upper_word));
    if (it == entries_.end()) throw OovError(std::string(upper_word));
    return it->second;
}

std::pair<std::size_t, std::size_t> PhoneSequence::phones_of_word(std::size_t w) const {
    if (w >= words.size()) throw InvalidInput("word index out of range");
    auto first = std::lower_bound(word_index.begin(), word_index.end(), w);
    auto last = std::upper_bound(first, word_index.end(), w);
    return {static_cast<std::size_t>(first - word_index.begin()),
            static_cast<std::size_t>(last - word_index.begin())};
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    for (const auto& chunk : split_ws(text)) {
        std::size_t i = 0;
        while (i < chunk.size()) {
            const bool punct = is_punct_char(chunk[i]);
            std::size_t j = i;
            if (punct) {
                while (j < chunk.size() && is_punct_char(chunk[j])) ++j;
            } else {
                // A word keeps inner apostrophes / hyphens followed by more letters.
                while (j < chunk.size()) {
                    if (!is_punct_char(chunk[j])) {
                        ++j;
                    } else if ((chunk[j] == '\'' || chunk[j] == '-') && j + 1 < chunk.size() &&
                               !is_punct_char(chunk[j + 1])) {
                        j += 2;
                    } else {
                        break;
                    }
                }
            }
            tokens.push_back(punct ? chunk.substr(i, j - i) : upper(chunk.substr(i, j - i)));
            i = j;
        }
    }
    return tokens;
}

bool is_punctuation_token(std::string_view token) {
    return !token.empty() && std::all_of(token.begin(), token.end(), is_punct_char);
}

PhoneSequence text_to_phones(std::string_view text, const Lexicon& lexicon) {
    PhoneSequence seq;
    for (const auto& token : tokenize(text)) {
        const std::size_t w = seq.words.size();
        seq.words.push_back(token);
        if (is_punctuation_token(token)) {
            seq.phones.push_back(Lexicon::kSilence);
            seq.word_index.push_back(w);
            seq.is_word_boundary.push_back(true);
            continue;
        }
        const auto& pron = lexicon.pronounce(token);
        for (std::size_t k = 0; k < pron.size(); ++k) {
            seq.phones.push_back(lexicon.id(pron[k]));
            seq.word_index.push_back(w);
            seq.is_word_boundary.push_back(k == 0);
        }
    }
    return seq;
}

PhoneSequence concat(const PhoneSequence& a, const PhoneSequence& b) {
    PhoneSequence out = a;
    const std::size_t shift = a.words.size();
    out.phones.insert(out.phones.end(), b.phones.begin(), b.phones.end());
    for (auto w : b.word_index) out.word_index.push_back(w + shift);
    out.is_word_boundary.insert(out.is_word_boundary.end(), b.is_word_boundary.begin(),
                                b.is_word_boundary.end());
    out.words.insert(out.words.end(), b.words.begin(), b.words.end());
    return out;
}

std::size_t WordAlignment::total_frames() const {
    return std::accumulate(phone_durations.begin(), phone_durations.end(), std::size_t{0});
}

FrameRange WordAlignment::frames_of_phones(std::size_t first, std::size_t last) const {
    if (first > last || last > phone_durations.size()) throw InvalidInput("phone range out of bounds");
    const auto begin = phone_durations.begin();
    const auto start = std::accumulate(begin, begin + static_cast<std::ptrdiff_t>(first), std::size_t{0});
    const auto end = std::accumulate(begin + static_cast<std::ptrdiff_t>(first),
                                     begin + static_cast<std::ptrdiff_t>(last), start);
    return {start, end};
}

ManifestRecord manifest_record_from_json(const nlohmann::json& j) {
    try {
        ManifestRecord r;
        r.id = j.at("id").get<std::string>();
        r.audio_path = j.value("audio_path", std::string{});
        r.text = j.at("text").get<std::string>();
        const auto& phones = j.at("phones");
        if (phones.is_string()) r.phones = split_ws(phones.get<std::string>());
        else r.phones = phones.get<std::vector<std::string>>();
        r.durations_frames = j.at("durations_frames").get<std::vector<int>>();
        r.speaker_id = j.value("speaker_id", std::string{});
        if (r.id.empty()) throw InvalidInput("manifest record has an empty id");
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed manifest record: ") + e.what());
    }
}

nlohmann::json to_json(const ManifestRecord& r) {
    std::string phones;
    for (const auto& p : r.phones) phones += (phones.empty() ? "" : " ") + p;
    return {{"id", r.id},
            {"audio_path", r.audio_path},
            {"text", r.text},
            {"phones", phones},
            {"durations_frames", r.durations_frames},
            {"speaker_id", r.speaker_id}};
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open manifest " + path.string());
    std::vector<ManifestRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(manifest_record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw InvalidInput("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

WordAlignment ingest_alignment(const std::vector<int>& durations, std::size_t frames,
                               const PhoneSequence& phones) {
    if (durations.size() != phones.size())
        throw AlignmentError("phone count mismatch: " + std::to_string(durations.size()) +
                             " durations for " + std::to_string(phones.size()) + " phones");
    for (int d : durations)
        if (d < 0) throw AlignmentError("negative phone duration");
    WordAlignment al;
    al.phone_durations = durations;
    if (al.total_frames() != frames)
        throw AlignmentError("alignment/feature length mismatch: durations sum to " +
                             std::to_string(al.total_frames()) + " but features have " +
                             std::to_string(frames) + " frames");
    al.spans.reserve(phones.word_count());
    for (std::size_t w = 0; w < phones.word_count(); ++w) {
        const auto [first, last] = phones.phones_of_word(w);
        al.spans.push_back(al.frames_of_phones(first, last));
    }
    return al;
}

WordAlignment ingest_alignment(const ManifestRecord& record, const VocoderFeatures& features,
                               const PhoneSequence& phones, const Lexicon& lexicon) {
    if (record.phones.size() != phones.size())
        throw AlignmentError("phone count mismatch: manifest lists " +
                             std::to_string(record.phones.size()) + " phones but the text yields " +
                             std::to_string(phones.size()));
    for (std::size_t i = 0; i < phones.size(); ++i)
        if (lexicon.id(record.phones[i]) != phones.phones[i])
            throw AlignmentError("phone " + std::to_string(i) + " is '" + record.phones[i] +
                                 "' in the manifest but '" + lexicon.name(phones.phones[i]) +
                                 "' from the text");
    return ingest_alignment(record.durations_frames, features.frames(), phones);
}

WordAlignment uniform_fallback_alignment(const PhoneSequence& phones, std::size_t frames) {
    const std::size_t n = phones.size();
    if (n == 0) throw AlignmentError("cannot align an empty phone sequence");
    if (frames < n) throw AlignmentError("fewer frames than phones");
    std::vector<int> durations(n, static_cast<int>(frames / n));
    for (std::size_t i = 0; i < frames % n; ++i) ++durations[i];
    return ingest_alignment(durations, frames, phones);
}

}  // namespace tbve
