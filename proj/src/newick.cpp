#include "treeshift/newick.hpp"

#include "treeshift/errors.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace treeshift {

namespace {

class NewickParser {
 public:
  explicit NewickParser(std::string_view text) : text_(text) {}

  RawTree parse() {
    skip_space();
    raw_.root = parse_subtree(-1);
    skip_space();
    if (peek() == ':') {
      ++pos_;
      parse_length();  // root length is ignored
      skip_space();
    }
    expect(';');
    skip_space();
    if (pos_ != text_.size()) {
      throw ParseError("trailing characters after ';' (only one tree per input)", pos_);
    }
    return std::move(raw_);
  }

 private:
  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

  void skip_space() {
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (c == '[') {
        const auto close = text_.find(']', pos_);
        if (close == std::string_view::npos) throw ParseError("unterminated comment", pos_);
        pos_ = close + 1;
      } else {
        break;
      }
    }
  }

  void expect(char c) {
    if (peek() != c) {
      if (pos_ >= text_.size()) {
        throw ParseError(std::string("unexpected end of input, expected '") + c + "'", pos_);
      }
      throw ParseError(std::string("expected '") + c + "' but found '" + peek() + "'", pos_);
    }
    ++pos_;
  }

  int parse_subtree(int parent) {
    const int id = static_cast<int>(raw_.nodes.size());
    raw_.nodes.emplace_back();
    raw_.nodes[id].parent = parent;
    skip_space();
    if (peek() == '(') {
      ++pos_;
      while (true) {
        const int child = parse_subtree(id);
        raw_.nodes[id].children.push_back(child);
        skip_space();
        if (peek() == ',') {
          ++pos_;
          continue;
        }
        expect(')');
        break;
      }
    }
    skip_space();
    raw_.nodes[id].label = parse_label();
    skip_space();
    if (parent >= 0) {
      if (peek() == ':') {
        ++pos_;
        raw_.nodes[id].length = parse_length();
        raw_.nodes[id].has_length = true;
      } else {
        const auto& label = raw_.nodes[id].label;
        throw ParseError("missing branch length for node '" +
                             (label.empty() ? std::string("<unlabeled>") : label) + "'",
                         pos_);
      }
    }
    if (raw_.nodes[id].children.empty() && raw_.nodes[id].label.empty()) {
      throw ParseError("tip without a label", pos_);
    }
    return id;
  }

  std::string parse_label() {
    std::string label;
    if (peek() == '\'') {
      const std::size_t start = pos_;
      ++pos_;
      while (true) {
        if (pos_ >= text_.size()) throw ParseError("unterminated quoted label", start);
        if (text_[pos_] == '\'') {
          if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '\'') {
            label.push_back('\'');
            pos_ += 2;
            continue;
          }
          ++pos_;
          break;
        }
        label.push_back(text_[pos_++]);
      }
      return label;
    }
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (c == '(' || c == ')' || c == ',' || c == ':' || c == ';' || c == '[' || c == '\'' ||
          std::isspace(static_cast<unsigned char>(c))) {
        break;
      }
      label.push_back(c);
      ++pos_;
    }
    return label;
  }

  double parse_length() {
    skip_space();
    const std::size_t start = pos_;
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == 'e' || c == 'E' ||
          c == '+' || c == '-') {
        ++pos_;
      } else {
        break;
      }
    }
    if (start == pos_) throw ParseError("expected a branch length", start);
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(text_.data() + start, text_.data() + pos_, value);
    if (ec != std::errc() || ptr != text_.data() + pos_) {
      throw ParseError("malformed branch length '" + std::string(text_.substr(start, pos_ - start)) + "'",
                       start);
    }
    return value;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  RawTree raw_;
};

bool needs_quotes(const std::string& label) {
  for (char c : label) {
    if (c == '(' || c == ')' || c == ',' || c == ':' || c == ';' || c == '[' || c == ']' ||
        c == '\'' || std::isspace(static_cast<unsigned char>(c))) {
      return true;
    }
  }
  return false;
}

void append_label(std::string& out, const std::string& label) {
  if (!needs_quotes(label)) {
    out += label;
    return;
  }
  out.push_back('\'');
  for (char c : label) {
    if (c == '\'') out.push_back('\'');
    out.push_back(c);
  }
  out.push_back('\'');
}

void append_length(std::string& out, double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  out += buf;
}

}  // namespace

PhyloTree parse_newick(std::string_view text) {
  return PhyloTree::from_raw(NewickParser(text).parse());
}

PhyloTree read_newick_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open tree file '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_newick(buffer.str());
}

std::string write_newick(const PhyloTree& tree, bool internal_labels) {
  std::string out;
  // Iterative to stay safe on deep caterpillars.
  struct Frame {
    NodeId node;
    std::size_t next_child;
  };
  std::vector<Frame> stack{{tree.root(), 0}};
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto ch = tree.children(f.node);
    if (!ch.empty() && f.next_child == 0) out.push_back('(');
    if (f.next_child < ch.size()) {
      if (f.next_child > 0) out.push_back(',');
      const NodeId child = ch[f.next_child++];
      stack.push_back({child, 0});
      continue;
    }
    if (!ch.empty()) out.push_back(')');
    if (tree.is_tip(f.node) || (internal_labels && !tree.label(f.node).empty())) {
      append_label(out, tree.label(f.node));
    }
    if (f.node != tree.root()) {
      out.push_back(':');
      append_length(out, tree.length(f.node));
    }
    stack.pop_back();
  }
  out.push_back(';');
  return out;
}

}  // namespace treeshift
