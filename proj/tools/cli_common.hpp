#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

namespace cfmtool {

// Binds CLI11 options to a name registry so a JSON config file can fill any
// flag not given on the command line (flags override file), unknown config
// keys are rejected, and the fully resolved configuration can be logged.
class OptionRegistry {
 public:
  explicit OptionRegistry(CLI::App* app) : app_(app) {}

  CLI::Option* add_int(const std::string& name, int& var,
                       const std::string& desc);
  CLI::Option* add_u64(const std::string& name, std::uint64_t& var,
                       const std::string& desc);
  CLI::Option* add_double(const std::string& name, double& var,
                          const std::string& desc);
  CLI::Option* add_string(const std::string& name, std::string& var,
                          const std::string& desc);
  CLI::Option* add_flag(const std::string& name, bool& var,
                        const std::string& desc);
  CLI::Option* add_double_list(const std::string& name,
                               std::vector<double>& var,
                               const std::string& desc);
  CLI::Option* add_int_list(const std::string& name, std::vector<int>& var,
                            const std::string& desc);

  // Fills unset options from the JSON object; throws std::invalid_argument
  // on keys that match no option of this subcommand.
  void apply_config(const nlohmann::json& config);

  // True once the option came from the command line or the config file.
  bool provided(const std::string& name, const nlohmann::json& config) const;

  // Throws std::invalid_argument unless every listed option was provided.
  void require(const std::vector<std::string>& names,
               const nlohmann::json& config) const;

  nlohmann::json resolved() const;

 private:
  struct Entry {
    CLI::Option* opt = nullptr;
    std::function<void(const nlohmann::json&)> set;
    std::function<nlohmann::json()> get;
  };
  CLI::App* app_;
  std::map<std::string, Entry> entries_;
};

// Parses --config JSON (object of flag-name -> value). Missing file -> error.
nlohmann::json load_config_file(const std::string& path);

}  // namespace cfmtool
