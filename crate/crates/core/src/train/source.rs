use ndarray::Array3;
use rayon::prelude::*;

use super::Result;
use crate::dataset::Class;
use crate::preprocess::Preprocessor;
use crate::Scalar;

/// Indexed, labelled images already in normalised space.
pub trait SampleSource<T>: Sync {
    fn len(&self) -> usize;
    fn id(&self, index: usize) -> &str;
    fn label(&self, index: usize) -> Class;
    /// C×H×W normalised tensor.
    fn load(&self, index: usize) -> Result<Array3<T>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads several samples, possibly concurrently, returned in `indices` order.
    fn load_many(&self, indices: &[usize]) -> Result<Vec<Array3<T>>>
    where
        T: Send,
    {
        indices.par_iter().map(|&i| self.load(i)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct InMemorySource<T> {
    pub ids: Vec<String>,
    pub images: Vec<Array3<T>>,
    pub labels: Vec<Class>,
}

impl<T> InMemorySource<T> {
    pub fn new(ids: Vec<String>, images: Vec<Array3<T>>, labels: Vec<Class>) -> Self {
        assert!(ids.len() == images.len() && ids.len() == labels.len());
        Self { ids, images, labels }
    }
}

impl<T: Scalar> SampleSource<T> for InMemorySource<T> {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn label(&self, index: usize) -> Class {
        self.labels[index]
    }

    fn load(&self, index: usize) -> Result<Array3<T>> {
        Ok(self.images[index].clone())
    }
}

/// Images decoded from disk on demand through a [`Preprocessor`].
#[derive(Clone, Debug)]
pub struct RecordSource {
    pub items: Vec<(String, std::path::PathBuf, Class)>,
    pub preprocessor: Preprocessor,
}

impl RecordSource {
    pub fn new(items: Vec<(String, std::path::PathBuf, Class)>, preprocessor: Preprocessor) -> Self {
        Self { items, preprocessor }
    }
}

impl<T: Scalar> SampleSource<T> for RecordSource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.items[index].0
    }

    fn label(&self, index: usize) -> Class {
        self.items[index].2
    }

    fn load(&self, index: usize) -> Result<Array3<T>> {
        let (id, path, _) = &self.items[index];
        Ok(self.preprocessor.load::<T>(path, id)?.data)
    }
}
