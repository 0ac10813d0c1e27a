#pragma once

#include <stdexcept>
#include <string>

namespace tbve {

// Base of every error the library raises on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller handed in something malformed (bad range, bad shape, bad file).
class InvalidInput : public Error {
public:
    using Error::Error;
};

class TooShortError : public InvalidInput {
public:
    using InvalidInput::InvalidInput;
};

class OovError : public InvalidInput {
public:
    explicit OovError(std::string word)
        : InvalidInput("out-of-lexicon word: " + word), word_(std::move(word)) {}
    const std::string& word() const { return word_; }

private:
    std::string word_;
};

class AlignmentError : public InvalidInput {
public:
    using InvalidInput::InvalidInput;
};

// External embedding provider failed (process exit, short read, ...).
class ProviderError : public Error {
public:
    using Error::Error;
};

// Checkpoint archive has the wrong schema version or fails its checksum.
class CheckpointError : public Error {
public:
    using Error::Error;
};

class CheckpointVersionError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

// Non-finite loss during training.
class NumericError : public Error {
public:
    using Error::Error;
};

// Failure inside the edit pipeline, tagged with the stage that raised it.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what, bool user_error = false)
        : Error(stage + ": " + what), stage_(std::move(stage)), detail_(what), user_error_(user_error) {}
    const std::string& stage() const { return stage_; }
    const std::string& detail() const { return detail_; }
    // True when the stage failed on InvalidInput (bad request, OOV, ...).
    bool user_error() const { return user_error_; }

private:
    std::string stage_;
    std::string detail_;
    bool user_error_ = false;
};

}  // namespace tbve
