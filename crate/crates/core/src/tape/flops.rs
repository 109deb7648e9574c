/// Accounting bucket for multiply-adds executed on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlopScope {
    QkvProjection,
    AttentionMatrix,
    AttentionApply,
    OutputProjection,
    KvReduction,
    Ffn,
    Other,
}

impl FlopScope {
    pub const ALL: [FlopScope; 7] = [
        FlopScope::QkvProjection,
        FlopScope::AttentionMatrix,
        FlopScope::AttentionApply,
        FlopScope::OutputProjection,
        FlopScope::KvReduction,
        FlopScope::Ffn,
        FlopScope::Other,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Instrumented counts: multiply-adds from matmul/conv kernels, and
/// per-element normalization FLOPs (softmax, layer norm; 2 per element).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopCounter {
    macs: [u64; 7],
    normalization: [u64; 7],
}

impl FlopCounter {
    pub(crate) fn add_macs(&mut self, scope: FlopScope, n: u64) {
        self.macs[scope.slot()] += n;
    }

    pub(crate) fn add_normalization(&mut self, scope: FlopScope, n: u64) {
        self.normalization[scope.slot()] += n;
    }

    pub fn macs(&self, scope: FlopScope) -> u64 {
        self.macs[scope.slot()]
    }

    pub fn normalization(&self, scope: FlopScope) -> u64 {
        self.normalization[scope.slot()]
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.iter().sum()
    }
}
