from typing import List
import graphviz
from config import DiagramConfig
from .exceptions import DecomposeMeError
from .layers import param_count
from .model_zoo import ModelSpec, expand_layers, infer_shapes

class ArchitectureDiagram:
    """网络结构图生成器"""
    def __init__(self):
        """初始化结构图生成器"""
        self.dot = graphviz.Digraph(
            comment='Model Architecture',
            format=DiagramConfig.FORMAT,
            engine='dot',
            graph_attr={'dpi': '150'}
        )
        base = {
            'shape': 'box',
            'style': 'rounded,filled',
            'fontname': DiagramConfig.FONT_FAMILY,
            'fontcolor': 'white',
        }
        # 节点样式
        self.styles = {
            'input': {**base, 'fillcolor': DiagramConfig.PRIMARY_COLOR, 'fontsize': '16'},
            'conv': {**base, 'fillcolor': DiagramConfig.SECONDARY_COLOR, 'fontsize': '13'},
            'stage': {**base, 'fillcolor': DiagramConfig.ACCENT_COLOR, 'fontsize': '12'},
            'other': {**base, 'fillcolor': DiagramConfig.BORDER_COLOR, 'fontsize': '11'},
        }

    @staticmethod
    def _shape(shape) -> str:
        return '×'.join(str(v) for v in shape)

    def _decomposed_cluster(self, index: int, layer, shape) -> List[str]:
        """分解层画成两个一维阶段的子图，返回 [入口, 出口] 节点名"""
        first, second = ('vertical', 'horizontal') if layer.order == 'vh' else ('horizontal', 'vertical')
        kernels = {'vertical': f'{layer.kernel}×1', 'horizontal': f'1×{layer.kernel}'}
        names = [f'l{index}_a', f'l{index}_b']
        with self.dot.subgraph(name=f'cluster_{index}') as sub:
            sub.attr(label=f'{index}.decomposed  {param_count(layer):,} params',
                     color=DiagramConfig.BORDER_COLOR, fontname=DiagramConfig.FONT_FAMILY)
            sub.node(names[0], f'{first} {kernels[first]}\nC={layer.in_channels} → L={layer.L}\n{layer.nl}',
                     **self.styles['stage'])
            sub.node(names[1], f'{second} {kernels[second]}\nL={layer.L} → F={layer.out_channels}\n'
                     f'{layer.nl}  out {self._shape(shape)}', **self.styles['stage'])
            sub.edge(names[0], names[1])
        return names

    def generate(self, spec: ModelSpec) -> str:
        """生成结构图 DOT 源码"""
        try:
            self.dot.clear()
            self.dot.attr(rankdir='TB', nodesep='0.4', ranksep='0.5')
            self.dot.attr('edge', color=DiagramConfig.BORDER_COLOR, penwidth='1.5')

            self.dot.node('input', f'{spec.name}\ninput {self._shape(spec.input_shape)}', **self.styles['input'])
            previous = 'input'
            for index, (layer, shape) in enumerate(zip(expand_layers(spec), infer_shapes(spec))):
                if layer.kind == 'decomposed':
                    entry, exit_ = self._decomposed_cluster(index, layer, shape)
                    self.dot.edge(previous, entry)
                    previous = exit_
                    continue

                node = f'l{index}'
                label = f'{index}.{layer.kind}'
                if layer.kind == 'conv2d':
                    label += f' {layer.kernel}×{layer.kernel}/{layer.stride}\n{layer.in_channels} → {layer.out_channels}'
                    style = self.styles['conv']
                elif layer.kind == 'linear':
                    label += f'\n{layer.in_channels} → {layer.out_channels}'
                    style = self.styles['conv']
                elif layer.kind == 'maxpool':
                    label += f' {layer.kernel}×{layer.kernel}/{layer.stride}'
                    style = self.styles['other']
                else:
                    style = self.styles['other']
                params = param_count(layer)
                if params:
                    label += f'\n{params:,} params'
                label += f'\nout {self._shape(shape)}'
                self.dot.node(node, label, **style)
                self.dot.edge(previous, node)
                previous = node

            return self.dot.source

        except DecomposeMeError as e:
            # 生成错误提示图
            error_dot = graphviz.Digraph()
            error_dot.attr(rankdir='TB')
            error_dot.attr('node', shape='box', style='rounded,filled')
            error_dot.node('root', '结构图生成失败', fillcolor=DiagramConfig.ERROR_COLOR)
            error_dot.node('error', str(e), fillcolor=DiagramConfig.ERROR_COLOR)
            error_dot.edge('root', 'error')
            return error_dot.source

    def export_image(self, dot_source: str, format: str = DiagramConfig.FORMAT) -> bytes:
        """导出图片（需要本机安装 graphviz 的 dot 程序）"""
        try:
            tmp_dot = graphviz.Source(dot_source, format=format)
            tmp_dot.engine = 'dot'
            return tmp_dot.pipe()
        except graphviz.ExecutableNotFound as e:
            raise OSError(f"导出图片失败，未找到 dot 程序: {str(e)}") from e
