#pragma once

#include <map>
#include <string>
#include <vector>

// Bundled static banks behind the attack harness and the synthetic corpus.
namespace ragfire::harness_data {

struct RoleTemplates {
  const char* role;
  std::vector<const char*> query_templates;
  std::vector<const char*> doc_templates;
};

const std::vector<RoleTemplates>& role_templates();
const std::map<std::string, std::vector<std::string>>& slot_fillers();

const std::vector<std::string>& unauthorized_frames();
const char* unauthorized_finance_literal();

std::map<std::string, std::vector<std::string>> build_synonym_entries();

}  // namespace ragfire::harness_data
