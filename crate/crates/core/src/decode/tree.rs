//! Lexicon prefix tree.

use crate::lexicon::Lexicon;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    /// Grapheme (or special phone) on the arc into this node; `None` at the root.
    pub label: Option<String>,
    pub parent: usize,
    pub children: Vec<usize>,
    /// Indices into [`LexTree::words`] of words ending here.
    pub words: Vec<usize>,
}

/// Trie over pronunciations; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexTree {
    pub nodes: Vec<TreeNode>,
    pub words: Vec<String>,
}

impl LexTree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    fn child(&self, node: usize, label: &str) -> Option<usize> {
        self.nodes[node].children.iter().copied().find(|&c| self.nodes[c].label.as_deref() == Some(label))
    }

    /// Node reached by following `pron` from the root.
    pub fn find(&self, pron: &[String]) -> Option<usize> {
        pron.iter().try_fold(0, |n, g| self.child(n, g))
    }
}

/// Build the prefix tree over every lexicon word (including `<UNK>` when
/// `include_unk`). Children are ordered by label.
pub fn build_prefix_tree(lex: &Lexicon, include_unk: bool) -> LexTree {
    let mut tree = LexTree {
        nodes: vec![TreeNode { label: None, parent: 0, children: Vec::new(), words: Vec::new() }],
        words: Vec::new(),
    };
    for (word, pron) in lex.words() {
        if !include_unk && word == crate::lexicon::UNK {
            continue;
        }
        let mut n = 0;
        for g in pron {
            n = match tree.child(n, g) {
                Some(c) => c,
                None => {
                    let id = tree.nodes.len();
                    tree.nodes.push(TreeNode { label: Some(g.clone()), parent: n, children: Vec::new(), words: Vec::new() });
                    let pos = tree.nodes[n]
                        .children
                        .iter()
                        .position(|&c| tree.nodes[c].label.as_deref() > Some(g.as_str()))
                        .unwrap_or(tree.nodes[n].children.len());
                    tree.nodes[n].children.insert(pos, id);
                    id
                }
            };
        }
        let w = tree.words.len();
        tree.words.push(word.to_string());
        tree.nodes[n].words.push(w);
    }
    tree
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(words: &[&str]) -> Lexicon {
        let mut l = Lexicon::new();
        for w in words {
            l.add_word(w).unwrap();
        }
        l
    }

    #[test]
    fn shared_prefix() {
        let t = build_prefix_tree(&lex(&["AB", "AC"]), false);
        assert_eq!(t.root().children.len(), 1);
        let a = t.root().children[0];
        assert_eq!(t.nodes[a].children.len(), 2);
        assert!(t.nodes[a].words.is_empty());
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn single_word_chain_and_bound() {
        let t = build_prefix_tree(&lex(&["ABC"]), false);
        assert_eq!(t.len(), 4);
        assert!(t.nodes.iter().all(|n| n.children.len() <= 1));
        let l = lex(&["ABC", "ABD", "X", "XY"]);
        let t = build_prefix_tree(&l, true);
        let graphemes: usize = l.words().map(|(_, p)| p.len()).sum();
        assert!(t.len() <= graphemes + 1);
        assert_eq!(t.words.len(), 5);
    }
}
