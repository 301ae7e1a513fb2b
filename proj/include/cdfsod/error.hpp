#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cdfsod {

enum class Errc {
    MalformedJson,
    DanglingReference,
    DuplicateId,
    NonPositiveBox,
    UnknownImageId,
    ZeroVector,
    DimMismatch,
    BadMagic,
    VersionMismatch,
    TruncatedFile,
    Io,
    EmptyClass,
    NegativeWeight,
    EmptyInput,
    NonPositiveTemperature,
    RetryExhausted,
    MissingEmbedding,
    RefinerFailure,
    UnknownPhrase,
    EmptyGroundTruth,
    InvalidArgument,
    Config,
};

std::string_view errc_name(Errc code) noexcept;

/// Exception carrying a machine-readable error kind. Every module reports
/// failures through this type so the CLI can map them onto exit codes.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

inline std::string_view errc_name(Errc code) noexcept {
    switch (code) {
        case Errc::MalformedJson: return "MalformedJson";
        case Errc::DanglingReference: return "DanglingReference";
        case Errc::DuplicateId: return "DuplicateId";
        case Errc::NonPositiveBox: return "NonPositiveBox";
        case Errc::UnknownImageId: return "UnknownImageId";
        case Errc::ZeroVector: return "ZeroVector";
        case Errc::DimMismatch: return "DimMismatch";
        case Errc::BadMagic: return "BadMagic";
        case Errc::VersionMismatch: return "VersionMismatch";
        case Errc::TruncatedFile: return "TruncatedFile";
        case Errc::Io: return "Io";
        case Errc::EmptyClass: return "EmptyClass";
        case Errc::NegativeWeight: return "NegativeWeight";
        case Errc::EmptyInput: return "EmptyInput";
        case Errc::NonPositiveTemperature: return "NonPositiveTemperature";
        case Errc::RetryExhausted: return "RetryExhausted";
        case Errc::MissingEmbedding: return "MissingEmbedding";
        case Errc::RefinerFailure: return "RefinerFailure";
        case Errc::UnknownPhrase: return "UnknownPhrase";
        case Errc::EmptyGroundTruth: return "EmptyGroundTruth";
        case Errc::InvalidArgument: return "InvalidArgument";
        case Errc::Config: return "Config";
    }
    return "Unknown";
}

}  // namespace cdfsod
