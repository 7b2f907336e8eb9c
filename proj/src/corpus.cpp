#include <fstream>
#include <sstream>

#include "ragfire/retrieval.hpp"

namespace ragfire {

std::string corpus_escape(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (char c : raw) {
    switch (c) {
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\\': out += "\\\\"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string corpus_unescape(std::string_view field) {
  std::string out;
  out.reserve(field.size());
  for (size_t i = 0; i < field.size(); ++i) {
    if (field[i] == '\\' && i + 1 < field.size()) {
      ++i;
      switch (field[i]) {
        case 't': out.push_back('\t'); break;
        case 'n': out.push_back('\n'); break;
        case 'r': out.push_back('\r'); break;
        case '\\': out.push_back('\\'); break;
        default: out.push_back(field[i]);
      }
    } else {
      out.push_back(field[i]);
    }
  }
  return out;
}

std::vector<Document> load_corpus_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open corpus file " + path);
  std::vector<Document> docs;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      const size_t tab = line.find('\t', start);
      if (tab == std::string::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    if (fields.size() < 3 || fields.size() > 4) {
      throw Error(ErrorCode::MalformedDoc,
                  path + ":" + std::to_string(line_no) + ": expected 3 or 4 fields");
    }
    Document d;
    d.id = fields[0];
    d.role_owner = fields[1];
    d.text = corpus_unescape(fields[2]);
    if (fields.size() == 4) {
      if (fields[3] != "poisoned") {
        throw Error(ErrorCode::MalformedDoc,
                    path + ":" + std::to_string(line_no) + ": unknown flag '" + fields[3] + "'");
      }
      d.poisoned = true;
    }
    if (d.id.empty() || d.text.empty()) {
      throw Error(ErrorCode::MalformedDoc,
                  path + ":" + std::to_string(line_no) + ": empty id or text");
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

void save_corpus_file(const std::string& path, std::span<const Document> docs) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  for (const Document& d : docs) {
    out << d.id << '\t' << d.role_owner << '\t' << corpus_escape(d.text);
    if (d.poisoned.value_or(false)) out << "\tpoisoned";
    out << '\n';
  }
}

}  // namespace ragfire
