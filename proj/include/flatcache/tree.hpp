#ifndef FLATCACHE_TREE_HPP
#define FLATCACHE_TREE_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flatcache/digest.hpp"

namespace flatcache {

struct CacheNode {
  uint64_t seq = 0;  // persistent creation counter; 0 is the root
  StateId state_id;
  std::optional<uint64_t> parent;  // absent only for the root
  std::string instruction_text;   // "ROOT", "PULL alpine:3.17", "RUN echo foo", ...
  std::string commit_ref;         // git commit SHA
};

// The state tree: nodes keyed by seq, branch labels (image names) pointing at
// tips. Label moves never delete nodes; old tips just become unlabeled.
class CacheTree {
 public:
  static CacheTree with_root(const std::string& root_commit);

  const CacheNode& root() const { return nodes_.at(0); }
  const CacheNode* find(uint64_t seq) const;
  const CacheNode& at(uint64_t seq) const;
  size_t node_count() const { return nodes_.size(); }

  // Appends a child. A duplicate state ID under the same parent is a usage
  // error (the caller should have treated it as a hit) except in rebuild
  // mode, where duplicate-ID siblings are deliberate.
  const CacheNode& add_node(uint64_t parent_seq, const StateId& id, std::string instruction_text,
                            std::string commit_ref, bool rebuild = false);

  // Hit search. During --rebuild every lookup is a miss (only FROM/base
  // resolution hits, and that goes by label, not by ID). Otherwise a match on
  // the branch of the image being built takes priority — deepest match on
  // that root-to-tip path — and failing that, the most recently created
  // match anywhere in the tree.
  const CacheNode* find_hit(const StateId& id, const std::string& image, bool rebuild) const;

  void move_label(const std::string& name, uint64_t seq);
  bool remove_label(const std::string& name);
  const std::map<std::string, uint64_t>& labels() const { return labels_; }
  std::vector<std::string> labels_of(uint64_t seq) const;

  // Union of root-to-tip paths over all labels, plus the root.
  std::set<uint64_t> reachable() const;
  // Root-to-tip node sequence for a label; empty if the label is unknown.
  std::vector<uint64_t> branch_path(const std::string& name) const;

  std::vector<const CacheNode*> children_of(uint64_t seq) const;  // seq order

  // Drops the given nodes (and any labels pointing into them). Callers pass
  // the complement of reachable(); children of removed nodes must be removed
  // too, which reachable() guarantees.
  void remove_nodes(const std::set<uint64_t>& seqs);

  // Indented two-line-per-node debug rendering; children in seq order,
  // labels in brackets.
  std::string render() const;

  // Graph-description (DOT) rendering of the same content.
  std::string render_dot() const;

  // Line-oriented persistence (one file, atomic swap handled by the caller).
  std::string serialize() const;
  static CacheTree parse(std::string_view text);

  uint64_t next_seq() const { return next_seq_; }

 private:
  CacheTree() = default;
  std::map<uint64_t, CacheNode> nodes_;
  std::map<std::string, uint64_t> labels_;
  uint64_t next_seq_ = 0;
};

}  // namespace flatcache

#endif
