#include "flatcache/tree.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "flatcache/errors.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

CacheTree CacheTree::with_root(const std::string& root_commit) {
  CacheTree t;
  CacheNode root;
  root.seq = 0;
  root.state_id = root_id();
  root.instruction_text = "ROOT";
  root.commit_ref = root_commit;
  t.nodes_[0] = std::move(root);
  t.next_seq_ = 1;
  return t;
}

const CacheNode* CacheTree::find(uint64_t seq) const {
  auto it = nodes_.find(seq);
  return it == nodes_.end() ? nullptr : &it->second;
}

const CacheNode& CacheTree::at(uint64_t seq) const {
  const CacheNode* n = find(seq);
  if (!n) throw InternalError(fmt::format("no tree node with seq {}", seq));
  return *n;
}

const CacheNode& CacheTree::add_node(uint64_t parent_seq, const StateId& id,
                                     std::string instruction_text, std::string commit_ref,
                                     bool rebuild) {
  at(parent_seq);  // parent must exist
  if (!rebuild) {
    for (auto* child : children_of(parent_seq)) {
      if (child->state_id == id) {
        throw InternalError(fmt::format(
            "node {} already has a child with state ID {} (should be a cache hit)", parent_seq,
            id.hex()));
      }
    }
  }
  CacheNode node;
  node.seq = next_seq_++;
  node.state_id = id;
  node.parent = parent_seq;
  node.instruction_text = std::move(instruction_text);
  node.commit_ref = std::move(commit_ref);
  auto [it, _] = nodes_.emplace(node.seq, std::move(node));
  return it->second;
}

const CacheNode* CacheTree::find_hit(const StateId& id, const std::string& image,
                                     bool rebuild) const {
  if (rebuild) return nullptr;  // misses whether or not the state is cached
  if (auto path = branch_path(image); !path.empty()) {
    const CacheNode* deepest = nullptr;
    for (uint64_t seq : path) {
      const CacheNode& n = nodes_.at(seq);
      if (n.state_id == id) deepest = &n;
    }
    if (deepest) return deepest;
  }
  const CacheNode* best = nullptr;
  for (auto& [seq, n] : nodes_) {
    if (n.state_id == id && (!best || n.seq > best->seq)) best = &n;
  }
  return best;
}

void CacheTree::move_label(const std::string& name, uint64_t seq) {
  at(seq);
  labels_[name] = seq;
}

bool CacheTree::remove_label(const std::string& name) { return labels_.erase(name) > 0; }

std::vector<std::string> CacheTree::labels_of(uint64_t seq) const {
  std::vector<std::string> out;
  for (auto& [name, s] : labels_) {
    if (s == seq) out.push_back(name);
  }
  return out;
}

std::set<uint64_t> CacheTree::reachable() const {
  std::set<uint64_t> out{0};
  for (auto& [name, tip] : labels_) {
    uint64_t cur = tip;
    while (true) {
      out.insert(cur);
      const CacheNode& n = nodes_.at(cur);
      if (!n.parent) break;
      cur = *n.parent;
    }
  }
  return out;
}

std::vector<uint64_t> CacheTree::branch_path(const std::string& name) const {
  auto it = labels_.find(name);
  if (it == labels_.end()) return {};
  std::vector<uint64_t> path;
  uint64_t cur = it->second;
  while (true) {
    path.push_back(cur);
    const CacheNode& n = nodes_.at(cur);
    if (!n.parent) break;
    cur = *n.parent;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

std::vector<const CacheNode*> CacheTree::children_of(uint64_t seq) const {
  std::vector<const CacheNode*> out;
  for (auto& [s, n] : nodes_) {
    if (n.parent && *n.parent == seq) out.push_back(&n);
  }
  return out;  // nodes_ is seq-ordered
}

void CacheTree::remove_nodes(const std::set<uint64_t>& seqs) {
  for (uint64_t seq : seqs) {
    if (seq == 0) throw InternalError("cannot remove the root node");
    nodes_.erase(seq);
  }
  for (auto it = labels_.begin(); it != labels_.end();) {
    if (!nodes_.count(it->second)) it = labels_.erase(it);
    else ++it;
  }
}

namespace {

void render_node(const CacheTree& t, const CacheNode& n, int depth, std::string& out) {
  std::string indent(static_cast<size_t>(depth) * 2, ' ');
  out += indent + n.state_id.abbrev();
  auto labels = t.labels_of(n.seq);
  if (!labels.empty()) {
    out += " [";
    for (size_t i = 0; i < labels.size(); ++i) {
      if (i) out += ", ";
      out += labels[i];
    }
    out += "]";
  }
  out += "\n" + indent + n.instruction_text + "\n";
  for (auto* child : t.children_of(n.seq)) {
    render_node(t, *child, depth + 1, out);
  }
}

}  // namespace

std::string CacheTree::render() const {
  std::string out;
  render_node(*this, root(), 0, out);
  return out;
}

std::string CacheTree::render_dot() const {
  std::string out = "digraph cache {\n  node [shape=box];\n";
  for (auto& [seq, n] : nodes_) {
    out += fmt::format("  n{} [label=\"{}\\n{}\"];\n", seq, n.state_id.abbrev(),
                       n.instruction_text);
  }
  size_t li = 0;
  for (auto& [name, tip] : labels_) {
    out += fmt::format("  l{} [label=\"{}\", style=filled, fillcolor=gray85];\n", li++, name);
  }
  for (auto& [seq, n] : nodes_) {
    if (n.parent) out += fmt::format("  n{} -> n{};\n", *n.parent, seq);
  }
  li = 0;
  for (auto& [name, tip] : labels_) {
    out += fmt::format("  l{} -> n{} [style=dashed];\n", li++, tip);
  }
  out += "}\n";
  return out;
}

std::string CacheTree::serialize() const {
  std::string out = "flatcache-index 1\n";
  for (auto& [seq, n] : nodes_) {
    out += fmt::format("n\t{}\t{}\t{}\t{}\t{}\n", n.seq,
                       n.parent ? fmt::format("{}", *n.parent) : "-", n.state_id.hex(),
                       n.commit_ref, escape_field(n.instruction_text));
  }
  for (auto& [name, tip] : labels_) {
    out += fmt::format("b\t{}\t{}\n", escape_field(name), tip);
  }
  out += fmt::format("s\t{}\n", next_seq_);
  return out;
}

CacheTree CacheTree::parse(std::string_view text) {
  auto lines = split(text, '\n');
  if (lines.empty() || lines[0] != "flatcache-index 1") {
    throw InternalError("unrecognized cache index format");
  }
  CacheTree t;
  uint64_t max_seq = 0;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto f = split(lines[i], '\t');
    if (f[0] == "n" && f.size() == 6) {
      CacheNode n;
      n.seq = std::stoull(f[1]);
      if (f[2] != "-") n.parent = std::stoull(f[2]);
      n.state_id = StateId::from_hex(f[3]);
      n.commit_ref = f[4];
      n.instruction_text = unescape_field(f[5]);
      max_seq = std::max(max_seq, n.seq);
      t.nodes_[n.seq] = std::move(n);
    } else if (f[0] == "b" && f.size() == 3) {
      t.labels_[unescape_field(f[1])] = std::stoull(f[2]);
    } else if (f[0] == "s" && f.size() == 2) {
      t.next_seq_ = std::stoull(f[1]);
    } else {
      throw InternalError(fmt::format("corrupt cache index line: {}", lines[i]));
    }
  }
  if (!t.nodes_.count(0)) throw InternalError("cache index lacks a root node");
  if (t.next_seq_ <= max_seq) t.next_seq_ = max_seq + 1;
  return t;
}

}  // namespace flatcache
