#pragma once

#include "pyrvit/param.hpp"

#include <nlohmann/json_fwd.hpp>

#include <string>
#include <vector>

namespace pyrvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Single-file binary container of named double arrays plus a JSON metadata
// block. Payload round-trips bit-exactly; a trailing FNV hash catches
// truncation and corruption.
class Checkpoint {
 public:
  struct Array {
    std::string name;
    std::vector<Eigen::Index> shape;
    std::vector<double> data;
  };

  void set_meta(const std::string& key, const std::string& value);
  std::string meta(const std::string& key) const;
  bool has_meta(const std::string& key) const;

  void add_array(const std::string& name, std::vector<Eigen::Index> shape, const double* data);
  bool has_array(const std::string& name) const;
  const Array& array(const std::string& name) const;
  std::vector<std::string> array_names() const;

  // Snapshot / restore a parameter list (values only; names must match).
  void add_params(const ParamList& params, const std::string& ns = "");
  void load_params(const ParamList& params, const std::string& ns = "") const;

  void write(const std::string& path) const;
  static Checkpoint read(const std::string& path);

 private:
  std::vector<Array> arrays_;
  std::vector<std::pair<std::string, std::string>> meta_;
};

}  // namespace pyrvit
