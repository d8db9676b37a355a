import os
from setuptools import find_packages, setup

with open(os.path.join(os.path.dirname(__file__), 'README.md')) as readme:
    README = readme.read()

# allow setup.py to be run from any path
os.chdir(os.path.normpath(os.path.join(os.path.abspath(__file__), os.pardir)))

setup(
    name='causal-avatar-runtime',
    version='0.1.0',
    packages=find_packages(),
    include_package_data=True,
    license='GNU AGPL v3',
    description='Streaming autoregressive audio-driven avatar diffusion on a toy latent task.',
    long_description=README,
    long_description_content_type='text/markdown',
    python_requires='>=3.8',
    install_requires=[
        'numpy',
        'tqdm',
    ],
    entry_points={
        'console_scripts': [
            'avatar-runtime=avatar_runtime.cli:main',
        ],
    },
    classifiers=[
        'Environment :: Console',
        'Intended Audience :: Developers',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: GNU Affero General Public License v3',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
)
