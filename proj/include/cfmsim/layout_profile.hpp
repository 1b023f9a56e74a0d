#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "json.hpp"

#include "cfmsim/types.hpp"

namespace cfmsim {

struct FieldLayout {
  std::uint32_t offset = 0;
  std::uint32_t size = 0;
};

struct StructLayout {
  std::uint32_t size = 0;
  std::map<std::string, FieldLayout> fields;
};

// Memory-distribution knowledge for the simulated kernel: per structure, the
// byte offset of every field plus the total object size. Everything that
// touches a kernel object field resolves its address through this profile;
// there are no hard-coded offsets anywhere else.
class LayoutProfile {
 public:
  static LayoutProfile defaults();
  static LayoutProfile from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;

  bool has_struct(const std::string& name) const;
  bool has_field(const std::string& name, const std::string& field) const;
  std::uint32_t size_of(const std::string& name) const;
  FieldLayout field(const std::string& name, const std::string& field) const;
  GuestAddr field_addr(GuestAddr obj, const std::string& name,
                       const std::string& field) const;

  const std::map<std::string, StructLayout>& structs() const { return structs_; }

 private:
  void validate() const;

  std::map<std::string, StructLayout> structs_;
};

// Field name constants, shared between the kernel and the out-of-guest side.
namespace layout {
inline constexpr const char* kDentry = "dentry";
inline constexpr const char* kInode = "inode";
inline constexpr const char* kProcess = "process";
inline constexpr const char* kFile = "file";
inline constexpr const char* kFdTable = "fdtable";
inline constexpr const char* kGlobals = "globals";
}  // namespace layout

}  // namespace cfmsim
