#include "cli_common.hpp"

#include <fstream>
#include <stdexcept>

#include "cfm/errors.hpp"

using nlohmann::json;

namespace cfmtool {

CLI::Option* OptionRegistry::add_int(const std::string& name, int& var,
                                     const std::string& desc) {
  CLI::Option* opt = app_->add_option("--" + name, var, desc);
  entries_[name] = {opt,
                    [&var](const json& j) { var = j.get<int>(); },
                    [&var]() { return json(var); }};
  return opt;
}

CLI::Option* OptionRegistry::add_u64(const std::string& name,
                                     std::uint64_t& var,
                                     const std::string& desc) {
  CLI::Option* opt = app_->add_option("--" + name, var, desc);
  entries_[name] = {opt,
                    [&var](const json& j) { var = j.get<std::uint64_t>(); },
                    [&var]() { return json(var); }};
  return opt;
}

CLI::Option* OptionRegistry::add_double(const std::string& name, double& var,
                                        const std::string& desc) {
  CLI::Option* opt = app_->add_option("--" + name, var, desc);
  entries_[name] = {opt,
                    [&var](const json& j) { var = j.get<double>(); },
                    [&var]() { return json(var); }};
  return opt;
}

CLI::Option* OptionRegistry::add_string(const std::string& name,
                                        std::string& var,
                                        const std::string& desc) {
  CLI::Option* opt = app_->add_option("--" + name, var, desc);
  entries_[name] = {opt,
                    [&var](const json& j) { var = j.get<std::string>(); },
                    [&var]() { return json(var); }};
  return opt;
}

CLI::Option* OptionRegistry::add_flag(const std::string& name, bool& var,
                                      const std::string& desc) {
  CLI::Option* opt = app_->add_flag("--" + name, var, desc);
  entries_[name] = {opt,
                    [&var](const json& j) { var = j.get<bool>(); },
                    [&var]() { return json(var); }};
  return opt;
}

CLI::Option* OptionRegistry::add_double_list(const std::string& name,
                                             std::vector<double>& var,
                                             const std::string& desc) {
  CLI::Option* opt = app_->add_option("--" + name, var, desc)->delimiter(',');
  entries_[name] = {opt,
                    [&var](const json& j) { var = j.get<std::vector<double>>(); },
                    [&var]() { return json(var); }};
  return opt;
}

CLI::Option* OptionRegistry::add_int_list(const std::string& name,
                                          std::vector<int>& var,
                                          const std::string& desc) {
  CLI::Option* opt = app_->add_option("--" + name, var, desc)->delimiter(',');
  entries_[name] = {opt,
                    [&var](const json& j) { var = j.get<std::vector<int>>(); },
                    [&var]() { return json(var); }};
  return opt;
}

void OptionRegistry::apply_config(const json& config) {
  if (!config.is_object())
    throw std::invalid_argument("config: top level must be a JSON object");
  for (const auto& [key, value] : config.items()) {
    const auto it = entries_.find(key);
    if (it == entries_.end())
      throw std::invalid_argument("config: unknown key '" + key + "'");
    // Command-line flags win over the file.
    if (it->second.opt->count() == 0) {
      try {
        it->second.set(value);
      } catch (const json::exception&) {
        throw std::invalid_argument("config: bad value type for '" + key + "'");
      }
    }
  }
}

bool OptionRegistry::provided(const std::string& name,
                              const json& config) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) return false;
  if (it->second.opt->count() > 0) return true;
  return config.is_object() && config.contains(name);
}

void OptionRegistry::require(const std::vector<std::string>& names,
                             const json& config) const {
  for (const std::string& name : names)
    if (!provided(name, config))
      throw std::invalid_argument("missing required option --" + name);
}

json OptionRegistry::resolved() const {
  json out;
  for (const auto& [name, entry] : entries_) out[name] = entry.get();
  return out;
}

json load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw cfm::io_error("cannot open config: " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw cfm::format_error(std::string("config parse: ") + e.what());
  }
}

}  // namespace cfmtool
