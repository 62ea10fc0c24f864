//! Clustering inference prompts.

use ifclust_core::TextItem;

use crate::error::LlmError;

const CLUSTERING_HEADER: &str = "\
You are a clustering assistant to do text clustering. Given a clustering goal and a list of indexed corpus:
First, read through all texts and think how can they be clustered based on the goal, determine the total number of clusters. Then think about how to assign all texts into these clusters. Check the answer format before giving the final answer: every item must be assigned to exactly one cluster, and no item should appear in multiple clusters or be missing. The reasoning and answer must be enclosed within <think> </think> and <answer> </answer> tags, respectively.

Final Output Format should be:

<think> assistant's reasoning process here </think>

<answer>
Total clusters: [N].
cluster1: [item_numbers separated by commas].
cluster2: [item_numbers separated by commas].
...
</answer>

Now, please follow the format for the following clustering task:

";

/// Optional system message spelling out the answer grammar.
pub const FORMAT_SYSTEM_PROMPT: &str = "\
You are a helpful clustering assistant. You final answer after reasoning and thinking must follow this exact format for all responses:

Required Structure:

<answer>
Total clusters: [N]
cluster1: [item1,item2,item3]
cluster2: [item4,item5]
cluster3: [item6,item7,item8]
</answer>

Format Rules:
1. Use exactly one answer section
2. In the answer section, start with \"Total clusters: [N]\" where N is the number of clusters
3. List each cluster as \"cluster1:\", \"cluster2:\", etc. with items in square brackets
4. Use 1-based indexing for items (1, 2, 3, ...)
5. Every item must be assigned to exactly one cluster
6. No item should appear in multiple clusters or be missing";

/// `|1|. text` lines, one per item.
pub fn enumerate_items(items: &[TextItem]) -> String {
    items
        .iter()
        .map(|item| format!("|{}|. {}", item.index, item.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_clustering_prompt(instruction: &str, items: &[TextItem]) -> Result<String, LlmError> {
    if items.is_empty() {
        return Err(LlmError::Config("cannot render a prompt without items".into()));
    }
    if let Some((pos, item)) = items.iter().enumerate().find(|(pos, item)| item.index != pos + 1) {
        return Err(LlmError::Config(format!(
            "item at position {} has index {}",
            pos + 1,
            item.index
        )));
    }
    Ok(format!(
        "{CLUSTERING_HEADER}Goal: {instruction}\n\nText:\n{}\n",
        enumerate_items(items)
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(texts: &[&str]) -> Vec<TextItem> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| TextItem {
                index: i + 1,
                text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn enumerates_each_item_once() {
        let p = render_clustering_prompt("Group by topic", &items(&["a", "b", "c"])).unwrap();
        for tag in ["|1|.", "|2|.", "|3|."] {
            assert_eq!(p.matches(tag).count(), 1);
        }
        assert!(p.contains("\n|2|. b\n"));
        assert!(p.contains("Goal: Group by topic\n"));
    }

    #[test]
    fn template_wording() {
        let p = render_clustering_prompt("g", &items(&["a"])).unwrap();
        assert!(p.starts_with("You are a clustering assistant to do text clustering."));
        assert!(p.contains("every item must be assigned to exactly one cluster"));
        assert!(p.contains("Total clusters: [N]."));
    }

    #[test]
    fn stable_and_validated() {
        let it = items(&["x", "y"]);
        assert_eq!(
            render_clustering_prompt("g", &it).unwrap(),
            render_clustering_prompt("g", &it).unwrap()
        );
        assert!(render_clustering_prompt("g", &[]).is_err());
        let mut bad = it;
        bad[1].index = 5;
        assert!(render_clustering_prompt("g", &bad).is_err());
    }
}
