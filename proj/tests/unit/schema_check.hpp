#pragma once

#include <regex>
#include <string>
#include <vector>

#include "json.hpp"

namespace testutil {

// Validator for the subset of draft-07 used by the shipped schemas.
class SchemaChecker {
 public:
  explicit SchemaChecker(nlohmann::json root) : root_(std::move(root)) {}

  std::vector<std::string> check(const nlohmann::json& doc) const {
    std::vector<std::string> errors;
    visit(root_, doc, "$", errors);
    return errors;
  }

 private:
  const nlohmann::json& resolve(const nlohmann::json& s) const {
    if (!s.contains("$ref")) return s;
    const std::string ref = s.at("$ref");
    const std::string prefix = "#/definitions/";
    return root_.at("definitions").at(ref.substr(prefix.size()));
  }

  static bool type_ok(const std::string& t, const nlohmann::json& v) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    return v.is_null();
  }

  void visit(const nlohmann::json& schema_in, const nlohmann::json& v, const std::string& path,
             std::vector<std::string>& err) const {
    const auto& s = resolve(schema_in);
    if (s.contains("type") && !type_ok(s.at("type"), v)) {
      err.push_back(path + ": expected " + s.at("type").get<std::string>());
      return;
    }
    if (s.contains("enum")) {
      bool found = false;
      for (const auto& e : s.at("enum")) found = found || e == v;
      if (!found) err.push_back(path + ": not in enum");
    }
    if (v.is_number()) {
      if (s.contains("minimum") && v.get<double>() < s.at("minimum").get<double>()) err.push_back(path + ": below minimum");
      if (s.contains("maximum") && v.get<double>() > s.at("maximum").get<double>()) err.push_back(path + ": above maximum");
    }
    if (v.is_string() && s.contains("pattern") &&
        !std::regex_search(v.get<std::string>(), std::regex(s.at("pattern").get<std::string>())))
      err.push_back(path + ": pattern mismatch");
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s.at("minItems").get<std::size_t>()) err.push_back(path + ": too few items");
      if (s.contains("maxItems") && v.size() > s.at("maxItems").get<std::size_t>()) err.push_back(path + ": too many items");
      if (s.contains("items"))
        for (std::size_t i = 0; i < v.size(); ++i) visit(s.at("items"), v[i], path + "[" + std::to_string(i) + "]", err);
    }
    if (v.is_object()) {
      if (s.contains("minProperties") && v.size() < s.at("minProperties").get<std::size_t>())
        err.push_back(path + ": too few properties");
      for (const auto& r : s.value("required", nlohmann::json::array()))
        if (!v.contains(r.get<std::string>())) err.push_back(path + ": missing " + r.get<std::string>());
      const auto props = s.value("properties", nlohmann::json::object());
      for (const auto& [key, val] : v.items()) {
        const std::string sub = path + "." + key;
        if (s.contains("propertyNames")) visit(s.at("propertyNames"), key, sub, err);
        if (props.contains(key)) {
          visit(props.at(key), val, sub, err);
        } else if (s.contains("additionalProperties")) {
          const auto& ap = s.at("additionalProperties");
          if (ap.is_boolean()) {
            if (!ap.get<bool>()) err.push_back(sub + ": unexpected property");
          } else {
            visit(ap, val, sub, err);
          }
        }
      }
    }
  }

  nlohmann::json root_;
};

}  // namespace testutil
