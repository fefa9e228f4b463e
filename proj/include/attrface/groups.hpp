#pragma once

// Region-based attribute groups and per-experiment group modes.

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "attrface/errors.hpp"

namespace attrface {

enum class Group { periocular = 0, mouth, nose, hair, accessories };

inline constexpr std::array<Group, 5> kAllGroups = {Group::periocular, Group::mouth, Group::nose, Group::hair,
                                                    Group::accessories};

inline std::string_view group_name(Group g) {
  constexpr std::array<std::string_view, 5> names = {"Periocular", "Mouth", "Nose", "Hair", "Accessories"};
  return names[static_cast<std::size_t>(g)];
}

inline char group_letter(Group g) { return "PMNHA"[static_cast<std::size_t>(g)]; }

inline std::optional<Group> group_from_letter(char c) {
  for (Group g : kAllGroups) {
    if (group_letter(g) == c) return g;
  }
  return std::nullopt;
}

inline std::optional<Group> group_from_name(std::string_view name) {
  for (Group g : kAllGroups) {
    if (group_name(g) == name) return g;
  }
  if (name.size() == 1) return group_from_letter(name[0]);
  return std::nullopt;
}

enum class GroupMode { off, predict, suppress };

inline std::string_view mode_name(GroupMode m) {
  switch (m) {
    case GroupMode::off: return "off";
    case GroupMode::predict: return "predict";
    case GroupMode::suppress: return "suppress";
  }
  return "off";
}

inline std::optional<GroupMode> mode_from_name(std::string_view s) {
  if (s == "off") return GroupMode::off;
  if (s == "predict") return GroupMode::predict;
  if (s == "suppress") return GroupMode::suppress;
  return std::nullopt;
}

/// Mode of every group for one experiment. Holding exactly one mode per
/// group keeps the predict and suppress sets disjoint.
class GroupModeAssignment {
 public:
  GroupModeAssignment() { modes_.fill(GroupMode::off); }

  GroupMode mode(Group g) const { return modes_[static_cast<std::size_t>(g)]; }
  void set(Group g, GroupMode m) { modes_[static_cast<std::size_t>(g)] = m; }

  std::vector<Group> groups_with(GroupMode m) const {
    std::vector<Group> out;
    for (Group g : kAllGroups) {
      if (mode(g) == m) out.push_back(g);
    }
    return out;
  }
  std::vector<Group> predicted() const { return groups_with(GroupMode::predict); }
  std::vector<Group> suppressed() const { return groups_with(GroupMode::suppress); }
  bool is_baseline() const { return predicted().empty() && suppressed().empty(); }

  /// Table notation: "FR", "+P", "+PMN-A", "-H". Letters in P,M,N,H,A order.
  std::string label() const {
    if (is_baseline()) return "FR";
    std::string s;
    if (auto p = predicted(); !p.empty()) {
      s += '+';
      for (Group g : p) s += group_letter(g);
    }
    if (auto q = suppressed(); !q.empty()) {
      s += '-';
      for (Group g : q) s += group_letter(g);
    }
    return s;
  }

  /// label() with U+2212 as the suppression marker, as printed in tables.
  std::string notation() const {
    std::string s = label();
    if (auto pos = s.find('-'); pos != std::string::npos) s.replace(pos, 1, "\u2212");
    return s;
  }

  /// Parses the table notation. Accepts ASCII '-', "--" and U+2212 as the
  /// suppression marker. Rejects unknown letters, repeats and overlaps.
  static GroupModeAssignment parse(std::string_view text) {
    GroupModeAssignment out;
    if (text == "FR") return out;
    std::string s;
    for (std::size_t i = 0; i < text.size(); ++i) {
      // U+2212 MINUS SIGN is E2 88 92 in UTF-8.
      if (i + 2 < text.size() && static_cast<unsigned char>(text[i]) == 0xE2 &&
          static_cast<unsigned char>(text[i + 1]) == 0x88 && static_cast<unsigned char>(text[i + 2]) == 0x92) {
        s += '-';
        i += 2;
      } else if (text[i] == ' ') {
        continue;
      } else {
        s += text[i];
      }
    }
    if (auto pos = s.find("--"); pos != std::string::npos) s.erase(pos, 1);
    const std::string quoted = "'" + std::string(text) + "'";
    if (s.empty()) throw ConfigError("modes", "empty mode string");
    std::size_t i = 0;
    bool any = false;
    auto read_letters = [&](GroupMode m) {
      std::size_t count = 0;
      while (i < s.size() && s[i] != '-' && s[i] != '+') {
        auto g = group_from_letter(s[i]);
        if (!g) throw ConfigError("modes", "unknown group letter '" + std::string(1, s[i]) + "' in " + quoted);
        if (out.mode(*g) != GroupMode::off) {
          const bool overlap = out.mode(*g) != m;
          throw ConfigError("modes", std::string(overlap ? "group in both predict and suppress sets"
                                                         : "group listed twice") +
                                         " in " + quoted);
        }
        out.set(*g, m);
        ++i;
        ++count;
      }
      if (count == 0) throw ConfigError("modes", "missing group letters in " + quoted);
      any = true;
    };
    if (i < s.size() && s[i] != '-') {
      if (s[i] == '+') ++i;
      read_letters(GroupMode::predict);
    }
    if (i < s.size() && s[i] == '-') {
      ++i;
      read_letters(GroupMode::suppress);
    }
    if (i != s.size() || !any) throw ConfigError("modes", "malformed mode string " + quoted);
    return out;
  }

  friend bool operator==(const GroupModeAssignment&, const GroupModeAssignment&) = default;

 private:
  std::array<GroupMode, 5> modes_{};
};

}  // namespace attrface
