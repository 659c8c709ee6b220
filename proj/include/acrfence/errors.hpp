#pragma once

#include <stdexcept>
#include <string>

namespace acrfence {

enum class Errc {
  // protocol
  MalformedFrame,
  ProtocolViolation,
  MissingToolName,
  // effectlog
  DuplicateKey,
  StorageFailure,
  NotFound,
  AlreadyFinalized,
  // classifier
  PolicyMissing,
  AnalyzerUnreachable,
  AnalyzerMalformed,
  // fence
  UnknownSession,
  FutureCheckpoint,
  NoPendingFork,
  TokenMismatch,
  BranchIdInUse,
  UpstreamFailure,
  BindFailure,
  UpstreamUnreachable,
  // config / simlab / cli
  ConfigInvalid,
  ScenarioMalformed,
};

const char* errc_name(Errc code);

class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

  Errc code() const { return code_; }

private:
  Errc code_;
};

}  // namespace acrfence
