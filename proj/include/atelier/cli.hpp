#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "atelier/api.hpp"
#include "json.hpp"

namespace atelier {

/// Process exit codes shared by every command.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,      // unexpected internal error
  kExitBadArgs = 2,      // bad flags or configuration
  kExitBindFailed = 3,   // serve could not listen
  kExitImageError = 4,   // an input image could not be read or decoded
  kExitUnreachable = 5,  // the server did not answer
  kExitJobFailed = 6,    // the server rejected the job or it ended unsuccessfully
};

enum class BackendKind { Mock, A1111 };

/// Service configuration, read from JSON. Every field is optional.
struct Config {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string store_root = "atelier-data";
  BackendKind backend = BackendKind::Mock;
  A1111Options a1111{.base_url = ""};
  int workers = 1;
  CannySettings canny;
  DepthSettings depth;
  std::vector<std::string> cors_origins = {"*"};
  int mock_step_delay_ms = 0;

  /// Throws InvalidArgument.
  void validate() const;
};

/// Throws InvalidArgument on unknown keys or wrong types.
Config config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Config& c);
/// Throws InvalidArgument when the file is missing or malformed.
Config load_config(const std::string& path);

/// Entry point of the `atelier` executable.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace atelier
