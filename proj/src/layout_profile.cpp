#include "cfmsim/layout_profile.hpp"

namespace cfmsim {

namespace {

StructLayout make_struct(std::uint32_t size,
                         std::initializer_list<std::pair<const char*, FieldLayout>> fs) {
  StructLayout s;
  s.size = size;
  for (const auto& [name, f] : fs) s.fields.emplace(name, f);
  return s;
}

}  // namespace

LayoutProfile LayoutProfile::defaults() {
  LayoutProfile p;
  // dentry is 192 bytes; the reference count sits at the start of the object
  // and short names are stored inline in the trailing bytes.
  p.structs_["dentry"] = make_struct(192, {
      {"refcount", {0, 8}},
      {"parent", {8, 8}},
      {"inode", {16, 8}},
      {"alias_next", {24, 8}},
      {"alias_prev", {32, 8}},
      {"hash_next", {40, 8}},
      {"name", {48, 144}},
  });
  p.structs_["inode"] = make_struct(64, {
      {"ino", {0, 8}},
      {"link_count", {8, 8}},
      {"mode", {16, 8}},
      {"owner_layer", {24, 8}},
      {"data_handle", {32, 8}},
      {"alias_head", {40, 8}},
  });
  p.structs_["process"] = make_struct(256, {
      {"pid", {0, 8}},
      {"uid", {8, 8}},
      {"tasks_next", {16, 8}},
      {"tasks_prev", {24, 8}},
      {"pid_ns", {32, 8}},
      {"mnt_ns", {40, 8}},
      {"uts_ns", {48, 8}},
      {"ipc_ns", {56, 8}},
      {"net_ns", {64, 8}},
      {"user_ns", {72, 8}},
      {"fd_table", {80, 8}},
      {"address_space_id", {88, 8}},
      {"alive", {96, 1}},
      {"hidden", {97, 1}},
      {"name", {112, 64}},
  });
  // struct file shares the 192-byte size class with dentries, so default
  // placement co-locates open-file records and dentries on the same pages.
  p.structs_["file"] = make_struct(192, {
      {"dentry", {0, 8}},
      {"mode", {8, 8}},
      {"flags", {16, 8}},
  });
  p.structs_["fdtable"] = make_struct(4096, {
      {"slots", {0, 4096}},
  });
  // Kernel anchor block at guest physical address 0 (page 0). Written once
  // at boot, then covered by static write protection.
  p.structs_["globals"] = make_struct(4096, {
      {"init_task", {64, 8}},
      {"dcache_hash", {72, 8}},
      {"dcache_buckets", {80, 8}},
  });
  p.validate();
  return p;
}

LayoutProfile LayoutProfile::from_json(const nlohmann::json& doc) {
  LayoutProfile p = defaults();
  if (!doc.is_object())
    throw ConfigError("layout profile: expected an object of structures");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    StructLayout s;
    const auto& body = it.value();
    if (!body.is_object() || !body.contains("size") || !body.contains("fields"))
      throw ConfigError("layout profile: structure '" + it.key() +
                        "' needs {size, fields}");
    s.size = body.at("size").get<std::uint32_t>();
    for (auto f = body.at("fields").begin(); f != body.at("fields").end(); ++f) {
      FieldLayout fl;
      if (f.value().is_number()) {
        fl.offset = f.value().get<std::uint32_t>();
        fl.size = 8;
      } else {
        fl.offset = f.value().at("offset").get<std::uint32_t>();
        fl.size = f.value().value("size", 8u);
      }
      s.fields[f.key()] = fl;
    }
    p.structs_[it.key()] = s;
  }
  p.validate();
  return p;
}

nlohmann::json LayoutProfile::to_json() const {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [name, s] : structs_) {
    nlohmann::json fields = nlohmann::json::object();
    for (const auto& [fname, f] : s.fields)
      fields[fname] = {{"offset", f.offset}, {"size", f.size}};
    doc[name] = {{"size", s.size}, {"fields", fields}};
  }
  return doc;
}

void LayoutProfile::validate() const {
  for (const auto& [name, s] : structs_) {
    if (s.size == 0)
      throw ConfigError("layout profile: structure '" + name + "' has size 0");
    for (const auto& [fname, f] : s.fields) {
      if (std::uint64_t(f.offset) + f.size > s.size)
        throw ConfigError("layout profile: field '" + name + "." + fname +
                          "' exceeds the object size");
    }
  }
}

bool LayoutProfile::has_struct(const std::string& name) const {
  return structs_.count(name) != 0;
}

bool LayoutProfile::has_field(const std::string& name, const std::string& field) const {
  auto it = structs_.find(name);
  return it != structs_.end() && it->second.fields.count(field) != 0;
}

std::uint32_t LayoutProfile::size_of(const std::string& name) const {
  auto it = structs_.find(name);
  if (it == structs_.end())
    throw SimFault("layout profile: unknown structure '" + name + "'");
  return it->second.size;
}

FieldLayout LayoutProfile::field(const std::string& name, const std::string& field) const {
  auto it = structs_.find(name);
  if (it == structs_.end())
    throw SimFault("layout profile: unknown structure '" + name + "'");
  auto f = it->second.fields.find(field);
  if (f == it->second.fields.end())
    throw SimFault("layout profile: unknown field '" + name + "." + field + "'");
  return f->second;
}

GuestAddr LayoutProfile::field_addr(GuestAddr obj, const std::string& name,
                                    const std::string& field) const {
  return obj + this->field(name, field).offset;
}

}  // namespace cfmsim
