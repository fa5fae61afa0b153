use super::{InputKind, LossGraph, Node};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

struct Fnv(u64);

impl Fnv {
    fn byte(&mut self, b: u8) {
        self.0 ^= u64::from(b);
        self.0 = self.0.wrapping_mul(FNV_PRIME);
    }
}

fn feed(node: &Node, h: &mut Fnv) {
    match node {
        Node::Leaf(l) => h.byte(0x80 | l.index() as u8),
        Node::Op(op, ch) => {
            h.byte(op.index() as u8);
            ch.iter().for_each(|c| feed(c, h));
        }
    }
}

/// 64-bit FNV-1a digest of the preorder encoding of a graph. Child order
/// matters; `add(a, b)` and `add(b, a)` hash differently.
pub fn structural_hash(g: &LossGraph) -> u64 {
    let mut h = Fnv(FNV_OFFSET);
    h.byte(match g.inputs {
        InputKind::Dense => 0x40,
        InputKind::Areas => 0x41,
    });
    feed(&g.body, &mut h);
    h.0
}
