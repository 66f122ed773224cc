#pragma once

// Flat key=value run configuration. Every key has a default; unknown keys are
// rejected so typos fail loudly.

#include <map>
#include <string>
#include <vector>

namespace stvla {

class RunConfig {
 public:
  RunConfig();

  static RunConfig from_file(const std::string& path);
  // Applies "key=value" tokens on top of the current values.
  void apply(const std::vector<std::string>& assignments);
  void set(const std::string& key, const std::string& value);

  const std::string& str(const std::string& key) const;
  double num(const std::string& key) const;
  long integer(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  bool flag(const std::string& key) const;

  // Sorted "key=value" lines, the exact text echoed into reports.
  std::string echo() const;
  std::string hash() const;
  // Hash over the keys that influence the alignment stage only.
  std::string stage1_hash() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace stvla
